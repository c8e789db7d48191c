"""Variational inference loop.

The loss for a batch ``x ~ q_phi`` is the Monte-Carlo mean of
``log q(x) - log p(y|x) - log prior(x)`` (plus an optional penalty), where the
log-prior is the denoising lower bound, the probability-flow ODE log-density,
or a negative total-variation regularizer. Convergence is judged on the
relative change of snapshot means.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from pathlib import Path
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from spvi.diffusion import VPSDE
from spvi.errors import DomainError, ObjectiveError, StepError
from spvi.forward.measurement import Measurement, input_size, make_log_likelihood
from spvi.io import save_checkpoint
from spvi.optim import adam_init, adam_update, global_norm
from spvi.priors import OdeConfig, SurrogateConfig, elbo_estimate, ode_logprob, tv_penalty
from spvi.scores import ScoreField

PRIOR_KINDS = ("surrogate", "exact", "tv")


@dataclasses.dataclass(frozen=True)
class ViConfig:
    """Optimization settings.

    ``epsilon`` is the relative mean-change threshold checked every
    ``snapshot_every`` steps. ``norm_momentum`` drives the running statistics
    of flow normalization layers (0 freezes them).
    """

    lr: float = 2e-4
    clip: float = 1.0
    batch_size: int = 64
    max_steps: int = 10_000
    snapshot_every: int = 1000
    epsilon: float = 1e-3
    prior_kind: str = "surrogate"
    n_time: int = 1
    n_noise: int = 1
    n_trace: int = 16
    exact_trace: bool = False
    ode_rtol: float = 1e-5
    ode_atol: float = 1e-5
    tv_weight: float = 1.0
    norm_momentum: float = 0.0
    seed: int = 0
    snapshot_seed: int = 1

    def __post_init__(self):
        if self.prior_kind not in PRIOR_KINDS:
            raise DomainError(f"prior_kind must be one of {PRIOR_KINDS}")
        if self.lr <= 0 or self.clip <= 0:
            raise DomainError("learning rate and clip must be positive")
        if self.batch_size < 1 or self.snapshot_every < 1 or self.max_steps < 0:
            raise DomainError("batch_size and snapshot_every must be >= 1, max_steps >= 0")
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError("epsilon must lie in (0, 1)")
        if not 0.0 <= self.norm_momentum <= 1.0:
            raise DomainError("norm_momentum must lie in [0, 1]")
        if self.tv_weight < 0:
            raise DomainError("tv_weight must be nonnegative")


@dataclasses.dataclass(frozen=True, eq=False)
class Problem:
    """Likelihood (and optional penalty) of a single inverse problem."""

    log_likelihood: Callable
    dim: int
    shape: tuple | None = None
    penalty: Callable | None = None
    measurement: Measurement | None = None

    @classmethod
    def from_measurement(cls, y: Measurement, penalty=None, shape=None) -> Problem:
        shape = shape or y.metadata.get("shape")
        dim = input_size(y.model_id, y.metadata) or y.dim
        return cls(make_log_likelihood(y), int(dim), tuple(shape) if shape else None, penalty, y)


@dataclasses.dataclass(frozen=True, eq=False)
class ScorePrior:
    """A score field together with the diffusion it was trained under."""

    score: ScoreField
    sde: VPSDE


def make_prior_fn(cfg: ViConfig, prior: ScorePrior | None, shape=None) -> Callable:
    """Single-sample log-prior ``(x, key) -> scalar`` for ``cfg.prior_kind``."""
    if cfg.prior_kind == "tv":
        if shape is None:
            raise DomainError("the TV prior needs the image shape")
        return lambda x, key: -tv_penalty(x, shape, cfg.tv_weight)
    if prior is None:
        raise DomainError(f"the {cfg.prior_kind} prior needs a score model")
    if cfg.prior_kind == "surrogate":
        scfg = SurrogateConfig(cfg.n_time, cfg.n_noise)
        proposal = prior.sde.proposal()
        return lambda x, key: elbo_estimate(prior.score, prior.sde, x, key, scfg, proposal)
    ocfg = OdeConfig(n_trace=cfg.n_trace, rtol=cfg.ode_rtol, atol=cfg.ode_atol,
                     exact_trace=cfg.exact_trace)
    return lambda x, key: ode_logprob(prior.score, prior.sde, x, key, ocfg)


def objective(params, family, problem: Problem, prior_fn: Callable, key, batch: int):
    """Monte-Carlo estimate of ``E_q[log q - log p(y|x) - log prior(x)] (+ penalty)``."""
    k_sample, k_prior = jax.random.split(key)
    x, logq = family.sample(params, k_sample, batch)
    lp = jax.vmap(prior_fn)(x, jax.random.split(k_prior, batch))
    ll = jax.vmap(problem.log_likelihood)(x)
    terms = logq - ll - lp
    if problem.penalty is not None:
        terms = terms + jax.vmap(problem.penalty)(x)
    return jnp.mean(terms)


def snapshot_deltas(snapshots) -> np.ndarray:
    """``|mu_k - mu_{k-1}| / |mu_{k-1}|`` for consecutive snapshots."""
    snaps = [np.asarray(s, dtype=float) for s in snapshots]
    out = []
    for prev, cur in zip(snaps[:-1], snaps[1:]):
        norm = np.linalg.norm(prev)
        if norm == 0.0:
            raise DomainError("relative change undefined for a zero-norm snapshot")
        out.append(np.linalg.norm(cur - prev) / norm)
    return np.asarray(out)


def converged(snapshots, epsilon: float) -> bool:
    """True when the last two relative changes are both below ``epsilon``.

    Fewer than three snapshots never count as converged.
    """
    if len(snapshots) < 3:
        return False
    deltas = snapshot_deltas(snapshots[-3:])
    return bool(np.all(deltas < epsilon))


@dataclasses.dataclass
class RunHistory:
    steps: list = dataclasses.field(default_factory=list)
    losses: list = dataclasses.field(default_factory=list)
    smoothed: list = dataclasses.field(default_factory=list)
    ms_per_step: list = dataclasses.field(default_factory=list)
    snapshot_steps: list = dataclasses.field(default_factory=list)
    deltas: list = dataclasses.field(default_factory=list)
    checkpoints: list = dataclasses.field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path):
        delta_at = dict(zip(self.snapshot_steps[1:], self.deltas))
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "delta", "ms_per_step"])
            for s, loss, ms in zip(self.steps, self.losses, self.ms_per_step):
                d = delta_at.get(s)
                writer.writerow([s, repr(float(loss)), "" if d is None else repr(float(d)),
                                 f"{ms:.4f}"])


def _smooth(prev, value, window=100):
    if prev is None:
        return value
    a = 2.0 / (window + 1)
    return (1 - a) * prev + a * value


def make_train_step(family, problem: Problem, prior_fn: Callable, cfg: ViConfig):
    """Jitted ``(params, opt_state, key) -> (params, opt_state, loss, grad_norm)``."""

    def loss_fn(params, key):
        return objective(params, family, problem, prior_fn, key, cfg.batch_size)

    @jax.jit
    def train_step(params, opt_state, key):
        loss, grad = jax.value_and_grad(loss_fn)(params, key)
        gnorm = global_norm(grad)
        new_params, new_state = adam_update(opt_state, params, grad, cfg.lr, cfg.clip)
        return new_params, new_state, loss, gnorm

    return train_step


def fit(problem: Problem, prior: ScorePrior | None, family, cfg: ViConfig, params=None,
        run_dir=None, log_every: int = 0):
    """Optimize ``family`` parameters against ``problem`` under ``cfg``.

    Returns ``(params, RunHistory)``. Snapshots of the representative mean are
    taken at step 0 and every ``cfg.snapshot_every`` steps; with ``run_dir``
    each snapshot also writes ``checkpoints/step_N``.
    """
    key = jax.random.PRNGKey(cfg.seed)
    k_init, k_loop = jax.random.split(key)
    if params is None:
        params = family.init(k_init)
    history = RunHistory()
    if cfg.max_steps == 0:
        return params, history

    prior_fn = make_prior_fn(cfg, prior, problem.shape)
    train_step = make_train_step(family, problem, prior_fn, cfg)
    update_stats = None
    if cfg.norm_momentum > 0 and hasattr(family, "update_statistics"):
        update_stats = jax.jit(lambda p, k: family.update_statistics(
            p, k, cfg.batch_size, cfg.norm_momentum))
    snap_key = jax.random.PRNGKey(cfg.snapshot_seed)
    snapshots = []
    opt_state = adam_init(params)
    smooth = None

    def take_snapshot(step_idx, params):
        snapshots.append(np.asarray(family.mean(params, snap_key)))
        history.snapshot_steps.append(step_idx)
        if len(snapshots) > 1:
            history.deltas.append(float(snapshot_deltas(snapshots[-2:])[0]))
        if run_dir is not None:
            path = Path(run_dir) / "checkpoints" / f"step_{step_idx}"
            save_checkpoint(path, params, checkpoint_manifest(family, step_idx))
            history.checkpoints.append(str(path.relative_to(run_dir)))

    take_snapshot(0, params)
    for i in range(1, cfg.max_steps + 1):
        k_step = jax.random.fold_in(k_loop, i)
        t0 = time.perf_counter()
        new_params, new_state, loss, gnorm = train_step(params, opt_state, k_step)
        loss = float(loss)
        elapsed = (time.perf_counter() - t0) * 1e3
        if not np.isfinite(loss):
            raise ObjectiveError(f"non-finite objective at step {i}: {loss}")
        if not np.isfinite(float(gnorm)):
            raise StepError(f"non-finite gradient at step {i}")
        params, opt_state = new_params, new_state
        if update_stats is not None:
            params = update_stats(params, jax.random.fold_in(k_step, 7))
        smooth = _smooth(smooth, loss)
        history.steps.append(i)
        history.losses.append(loss)
        history.smoothed.append(smooth)
        history.ms_per_step.append(elapsed)
        if log_every and i % log_every == 0:
            print(f"step {i:7d}  loss {smooth:.4f}")
        if i % cfg.snapshot_every == 0:
            take_snapshot(i, params)
            if converged(snapshots, cfg.epsilon):
                history.converged = True
                break
    return params, history


def checkpoint_manifest(family, step: int) -> dict:
    manifest = {"family": family.kind, "dim": int(family.dim), "step": int(step)}
    if family.kind == "realnvp":
        manifest.update(n_layers=int(family.n_layers), width=int(family.width),
                        masks=family.masks().astype(int).tolist())
    return manifest


def time_steps(family, params, problem: Problem, prior: ScorePrior | None, cfg: ViConfig,
               n_steps: int = 5) -> float:
    """Median wall time (seconds) of a compiled optimization step."""
    prior_fn = make_prior_fn(cfg, prior, problem.shape)
    train_step = make_train_step(family, problem, prior_fn, cfg)
    opt_state = adam_init(params)
    key = jax.random.PRNGKey(cfg.seed)
    out = train_step(params, opt_state, key)
    jax.block_until_ready(out)
    times = []
    for i in range(n_steps):
        t0 = time.perf_counter()
        out = train_step(params, opt_state, jax.random.fold_in(key, i + 1))
        jax.block_until_ready(out)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
