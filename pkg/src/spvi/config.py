"""Run configuration schema (YAML, strict: unknown keys are errors)."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

EXPERIMENTS = ("train-score", "infer", "baseline-sweep", "probe-bound", "evaluate",
               "make-measurements")


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DiffusionCfg(Strict):
    beta_min: float = Field(0.1, gt=0)
    beta_max: float = Field(20.0, gt=0)
    t_eps: float = Field(1e-5, gt=0, lt=1)


class GaussianPriorCfg(Strict):
    kind: Literal["gaussian"]
    mean: list[float]
    cov: list[list[float]]


class GmmPriorCfg(Strict):
    kind: Literal["gmm"]
    weights: list[float]
    means: list[list[float]]
    covs: list[list[list[float]]]


class BimodalPriorCfg(Strict):
    kind: Literal["bimodal"]


class SmoothPriorCfg(Strict):
    """Squared-exponential Gaussian image prior on a square grid."""

    kind: Literal["smooth_gaussian"]
    side: int = Field(gt=0)
    mean: float = 0.5
    length: float = Field(0.5, gt=0)
    variance: float = Field(0.02, gt=0)
    nugget: float = Field(0.03, gt=0)


class NetworkPriorCfg(Strict):
    kind: Literal["network"]
    checkpoint: Path


PriorCfg = Union[GaussianPriorCfg, GmmPriorCfg, BimodalPriorCfg, SmoothPriorCfg, NetworkPriorCfg]


class NetCfg(Strict):
    hidden: list[int] = [256, 256]
    embed_dim: int = 32
    activation: Literal["silu", "tanh", "softplus", "gelu"] = "silu"


class DatasetCfg(Strict):
    """Training data: a tensor file of shape (n, ...) or generated phantoms."""

    path: Optional[Path] = None
    phantoms: Optional[int] = Field(None, gt=0)
    side: Optional[int] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.phantoms is None):
            raise ValueError("give exactly one of path or phantoms")
        if self.phantoms is not None and self.side is None:
            raise ValueError("phantoms need side")
        return self


class TrainCfg(Strict):
    lr: float = Field(1e-3, gt=0)
    steps: int = Field(5000, ge=0)
    batch_size: int = Field(256, gt=0)
    clip: Optional[float] = Field(1.0, gt=0)


class OperatorCfg(Strict):
    model_id: Literal["denoise", "lowfreq", "mri", "linear", "vlbi_vis", "vlbi_closure"]
    shape: Optional[list[int]] = None
    fraction: Optional[float] = Field(None, gt=0, le=1)
    accel: Optional[float] = Field(None, ge=1)
    matrix: Optional[list[list[float]]] = None
    coverage: Optional[Path] = None
    fov_uas: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _required(self):
        need = {
            "lowfreq": ("shape", "fraction"),
            "mri": ("shape", "accel"),
            "linear": ("matrix",),
            "vlbi_vis": ("shape", "coverage", "fov_uas"),
            "vlbi_closure": ("shape", "coverage", "fov_uas"),
        }.get(self.model_id, ())
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.model_id} needs {', '.join(missing)}")
        return self


class TruthCfg(Strict):
    path: Optional[Path] = None
    values: Optional[list[float]] = None
    phantom_seed: Optional[int] = None
    prior_sample_seed: Optional[int] = None

    @model_validator(mode="after")
    def _one_source(self):
        given = [k for k in ("path", "values", "phantom_seed", "prior_sample_seed")
                 if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError("give exactly one truth source")
        return self


class MeasureCfg(Strict):
    operator: OperatorCfg
    truth: TruthCfg
    sigma: float = Field(ge=0)


class FamilyCfg(Strict):
    kind: Literal["diag_gaussian", "realnvp"] = "diag_gaussian"
    n_layers: int = Field(32, gt=0)
    width: Optional[int] = Field(None, gt=0)
    init_mean: float = 0.5
    init_std: float = Field(0.1, gt=0)


class ViCfg(Strict):
    lr: float = Field(2e-4, gt=0)
    clip: float = Field(1.0, gt=0)
    batch_size: int = Field(64, gt=0)
    max_steps: int = Field(10_000, ge=0)
    snapshot_every: int = Field(1000, gt=0)
    epsilon: float = Field(1e-3, gt=0, lt=1)
    prior_kind: Literal["surrogate", "exact", "tv"] = "surrogate"
    n_time: int = Field(1, gt=0)
    n_noise: int = Field(1, gt=0)
    n_trace: int = Field(16, gt=0)
    exact_trace: bool = False
    tv_weight: float = Field(1.0, ge=0)
    norm_momentum: float = Field(0.0, ge=0, le=1)
    flux_target: Optional[float] = None
    flux_weight: float = Field(0.0, ge=0)


class SweepCfg(Strict):
    methods: list[Literal["sde_proj", "score_ald", "dps"]] = ["sde_proj", "score_ald", "dps"]
    n_values: int = Field(100, gt=0)
    n_samples: int = Field(10_000, ge=100)
    n_steps: int = Field(1000, gt=0)


class ProbeCfg(Strict):
    n_samples: int = Field(128, gt=0)
    n_repeats: int = Field(20, gt=1)
    n_time: int = Field(2048, gt=0)
    n_trace: int = Field(16, gt=0)
    source_run: Optional[Path] = None


class RunConfig(Strict):
    kind: Literal["train-score", "infer", "baseline-sweep", "probe-bound", "evaluate",
                  "make-measurements"]
    output_dir: Path
    seed: int = 0
    diffusion: DiffusionCfg = DiffusionCfg()
    prior: Optional[PriorCfg] = Field(None, discriminator="kind")
    network: NetCfg = NetCfg()
    dataset: Optional[DatasetCfg] = None
    train: TrainCfg = TrainCfg()
    measure: Optional[MeasureCfg] = None
    bundle: Optional[Path] = None
    family: FamilyCfg = FamilyCfg()
    vi: ViCfg = ViCfg()
    sweep: SweepCfg = SweepCfg()
    probe: ProbeCfg = ProbeCfg()
    run: Optional[Path] = None

    @model_validator(mode="after")
    def _sections(self):
        need = {
            "train-score": ("dataset",),
            "infer": ("prior", "bundle"),
            "baseline-sweep": ("prior", "bundle"),
            "probe-bound": ("prior",),
            "evaluate": ("run",),
            "make-measurements": ("measure",),
        }[self.kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"experiment {self.kind} needs: {', '.join(missing)}")
        return self


def load_config(path) -> RunConfig:
    """Parse and validate a YAML config; relative paths resolve against its folder."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping")
    cfg = RunConfig.model_validate(raw)
    return _resolve_paths(cfg, path.parent)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    def fix(p):
        return p if p is None or p.is_absolute() else (base / p)

    updates = {"output_dir": fix(cfg.output_dir), "bundle": fix(cfg.bundle), "run": fix(cfg.run)}
    if isinstance(cfg.prior, NetworkPriorCfg):
        updates["prior"] = cfg.prior.model_copy(update={"checkpoint": fix(cfg.prior.checkpoint)})
    if cfg.dataset is not None and cfg.dataset.path is not None:
        updates["dataset"] = cfg.dataset.model_copy(update={"path": fix(cfg.dataset.path)})
    if cfg.measure is not None:
        op = cfg.measure.operator
        truth = cfg.measure.truth
        updates["measure"] = cfg.measure.model_copy(update={
            "operator": op.model_copy(update={"coverage": fix(op.coverage)}),
            "truth": truth.model_copy(update={"path": fix(truth.path)}),
        })
    if cfg.probe.source_run is not None:
        updates["probe"] = cfg.probe.model_copy(update={"source_run": fix(cfg.probe.source_run)})
    return cfg.model_copy(update=updates)
