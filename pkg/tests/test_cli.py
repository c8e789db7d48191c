import csv
import json
import subprocess
import sys

import jax.numpy as jnp
import numpy as np
import pytest
import yaml

import spvi  # noqa: F401
from spvi.cli import configure_threads, main, orphans
from spvi.config import load_config
from spvi.forward.measurement import make_forward
from spvi.io import read_json, read_tensor, write_tensor


def _write(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def _metrics(run_dir):
    return {row["metric"]: float(row["value"]) for row in csv.DictReader((run_dir / "metrics.csv").open())}


MEAS = {
    "kind": "make-measurements",
    "output_dir": "meas",
    "seed": 3,
    "prior": {"kind": "smooth_gaussian", "side": 4},
    "measure": {"operator": {"model_id": "lowfreq", "shape": [4, 4], "fraction": 0.25},
                "truth": {"prior_sample_seed": 1}, "sigma": 2.0},
}
INFER = {
    "kind": "infer",
    "output_dir": "infer",
    "prior": {"kind": "smooth_gaussian", "side": 4},
    "bundle": "meas",
    "vi": {"max_steps": 40, "snapshot_every": 20, "lr": 0.01, "batch_size": 16},
}


@pytest.fixture(scope="module")
def infer_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["run", _write(base, "meas.yaml", MEAS)]) == 0
    assert main(["run", _write(base, "infer.yaml", INFER)]) == 0
    return base


# -- config / validate -----------------------------------------------------------

def test_validate_ok_and_paths_resolve(tmp_path, capsys):
    path = _write(tmp_path, "c.yaml", INFER)
    assert main(["validate", path]) == 0
    assert json.loads(capsys.readouterr().out) == {"valid": True, "kind": "infer"}
    cfg = load_config(path)
    assert cfg.bundle == tmp_path / "meas" and cfg.output_dir == tmp_path / "infer"


@pytest.mark.parametrize("change", [
    {"vi": {"learning_rate": 0.1}},          # unknown key
    {"vi": {"epsilon": 1.5}},                # out of range
    {"kind": "sample"},                      # unknown experiment
    {"bundle": None},                        # missing required section
    {"family": {"kind": "made"}},
])
def test_validate_rejects(tmp_path, change, capsys):
    cfg = {**INFER, **change}
    cfg = {k: v for k, v in cfg.items() if v is not None}
    assert main(["validate", _write(tmp_path, "c.yaml", cfg)]) == 3
    record = json.loads(capsys.readouterr().err)
    assert record["exit_code"] == 3 and record["error"]


def test_validate_bad_yaml_and_missing(tmp_path):
    (tmp_path / "bad.yaml").write_text("kind: [unclosed\n")
    assert main(["validate", str(tmp_path / "bad.yaml")]) == 3
    assert main(["validate", str(tmp_path / "nope.yaml")]) == 2


def test_operator_requirements(tmp_path):
    cfg = {**MEAS, "measure": {**MEAS["measure"], "operator": {"model_id": "mri", "shape": [4, 4]}}}
    assert main(["validate", _write(tmp_path, "c.yaml", cfg)]) == 3


# -- run -------------------------------------------------------------------------

def test_missing_config_exit_2_no_artifacts(tmp_path):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2
    assert list(tmp_path.iterdir()) == []


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spvi.cli", "run", str(tmp_path / "x.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "FileNotFoundError"


def test_infer_artifacts_and_manifest(infer_run):
    run = infer_run / "infer"
    for name in ("history.csv", "metrics.csv", "manifest.json", "posterior_mean.spvi",
                 "posterior_std.spvi", "checkpoints/final/manifest.json",
                 "checkpoints/step_20/params.spvi"):
        assert (run / name).exists(), name
    manifest = read_json(run / "manifest.json")
    assert manifest["status"] == "complete" and manifest["seeds"] == {"seed": 0}
    assert manifest["config"]["vi"]["max_steps"] == 40
    assert manifest["code_version"] == spvi.__version__
    assert orphans(run) == []
    m = _metrics(run)
    assert m["steps"] == 40 and np.isfinite(m["kl_to_posterior"])
    assert read_tensor(run / "posterior_mean.spvi").shape == (4, 4)


def test_infer_determinism(infer_run):
    again = {**INFER, "output_dir": "infer_again"}
    assert main(["run", _write(infer_run, "again.yaml", again)]) == 0
    assert (infer_run / "infer" / "metrics.csv").read_bytes() == \
        (infer_run / "infer_again" / "metrics.csv").read_bytes()


def test_evaluate_run(infer_run):
    cfg = {"kind": "evaluate", "output_dir": "eval", "run": "infer"}
    assert main(["run", _write(infer_run, "eval.yaml", cfg)]) == 0
    m = _metrics(infer_run / "eval")
    assert {"psnr", "coverage_3sigma"} <= set(m)
    assert 0.0 <= m["coverage_3sigma"] <= 1.0


def test_export(infer_run):
    run = infer_run / "infer"
    assert main(["export", str(run)]) == 0
    manifest = read_json(run / "manifest.json")
    assert "exports/loss_curve.csv" in manifest["exports"]
    assert "exports/posterior_mean.spvi" in manifest["exports"]
    rows = list(csv.DictReader((run / "exports" / "loss_curve.csv").open()))
    assert len(rows) == 40 and rows[0]["loss"] == rows[0]["smoothed_loss"]
    assert orphans(run) == []


def test_export_errors(tmp_path):
    assert main(["export", str(tmp_path / "none")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["export", str(tmp_path / "empty")]) == 3


def test_locked_run_directory(tmp_path):
    (tmp_path / "meas").mkdir()
    (tmp_path / "meas" / ".lock").write_text("123")
    assert main(["run", _write(tmp_path, "m.yaml", MEAS)]) == 3


def test_numerical_failure_exit_4(tmp_path):
    write_tensor(tmp_path / "data.spvi", np.full((20, 2), np.nan))
    cfg = {"kind": "train-score", "output_dir": "score", "dataset": {"path": "data.spvi"},
           "network": {"hidden": [8]}, "train": {"steps": 5, "batch_size": 4}}
    assert main(["run", _write(tmp_path, "t.yaml", cfg)]) == 4
    assert read_json(tmp_path / "score" / "error.json")["exit_code"] == 4


def test_threads_env():
    env = {"SPVI_THREADS": "1"}
    assert configure_threads(env) == 1
    assert "intra_op_parallelism_threads=1" in env["XLA_FLAGS"]
    assert configure_threads({}) is None
    with pytest.raises(ValueError):
        configure_threads({"SPVI_THREADS": "0"})


# -- make-measurements -----------------------------------------------------------

def test_noiseless_bundle_equals_forward(tmp_path):
    cfg = {**MEAS, "output_dir": "clean", "measure": {**MEAS["measure"], "sigma": 0.0}}
    assert main(["run", _write(tmp_path, "c.yaml", cfg)]) == 0
    truth = read_tensor(tmp_path / "clean" / "truth.spvi").astype(float)
    clean = make_forward("lowfreq", {"shape": (4, 4), "fraction": 0.25})(jnp.asarray(truth))
    np.testing.assert_array_equal(read_tensor(tmp_path / "clean" / "values.spvi"),
                                  np.asarray(clean, np.float32))
    assert np.all(read_tensor(tmp_path / "clean" / "noise_sigma.spvi") == 0)


def test_mri_bundle_stores_mask_and_noise_moments(tmp_path):
    sigma = 0.3
    resid = []
    for seed in range(6):
        cfg = {"kind": "make-measurements", "output_dir": f"mri{seed}", "seed": seed,
               "measure": {"operator": {"model_id": "mri", "shape": [16, 16], "accel": 4},
                           "truth": {"phantom_seed": 5}, "sigma": sigma}}
        assert main(["run", _write(tmp_path, f"m{seed}.yaml", cfg)]) == 0
        run = tmp_path / f"mri{seed}"
        mask = read_tensor(run / "mask.spvi")
        assert mask.shape == (16, 16) and abs(mask.mean() - 0.25) < 0.025 and mask[0, 0] == 1
        truth = read_tensor(run / "truth.spvi").astype(float)
        clean = make_forward("mri", {"shape": (16, 16), "mask": mask})(jnp.asarray(truth.ravel()))
        resid.append(read_tensor(run / "values.spvi") - np.asarray(clean))
    r = np.concatenate(resid) / sigma
    n = r.size
    assert abs(r.mean()) < 3 / np.sqrt(n)
    assert abs(r.var() - 1) < 3 * np.sqrt(2 / n)


# -- other experiments -----------------------------------------------------------

def test_probe_bound_export(tmp_path):
    cfg = {"kind": "probe-bound", "output_dir": "probe",
           "prior": {"kind": "gaussian", "mean": [0, 0], "cov": [[1, 0.5], [0.5, 1]]},
           "probe": {"n_samples": 4, "n_repeats": 3, "n_time": 256}}
    assert main(["run", _write(tmp_path, "p.yaml", cfg)]) == 0
    assert main(["export", str(tmp_path / "probe")]) == 0
    lines = (tmp_path / "probe" / "exports" / "boundgap.csv").read_text().splitlines()
    assert lines[0] == "sample_id,repeat,b_value,ode_value" and len(lines) == 13
    assert _metrics(tmp_path / "probe")["n_values"] == 12


def test_sweep_run_export(tmp_path):
    meas = {"kind": "make-measurements", "output_dir": "bmeas", "prior": {"kind": "bimodal"},
            "measure": {"operator": {"model_id": "linear", "matrix": [[1, 0]]},
                        "truth": {"values": [0.3, 0.0]}, "sigma": 0.7}}
    assert main(["run", _write(tmp_path, "b.yaml", meas)]) == 0
    sweep = {"kind": "baseline-sweep", "output_dir": "sweep", "prior": {"kind": "bimodal"},
             "bundle": "bmeas", "sweep": {"n_values": 3, "n_samples": 200, "n_steps": 20}}
    assert main(["run", _write(tmp_path, "s.yaml", sweep)]) == 0
    run = tmp_path / "sweep"
    manifest = read_json(run / "manifest.json")
    assert set(manifest["weight_semantics"]) == {"sde_proj", "score_ald", "dps"}
    assert "samples/dps_002.spvi" in manifest["artifacts"]
    assert read_tensor(run / "samples" / "sde_proj_000.spvi").shape == (200, 2)
    assert main(["export", str(run)]) == 0
    rows = list(csv.DictReader((run / "exports" / "kl_vs_weight.csv").open()))
    assert len(rows) == 9 and {r["method"] for r in rows} == {"sde_proj", "score_ald", "dps"}
    assert orphans(run) == []


def test_train_then_infer_with_network_prior(tmp_path):
    train = {"kind": "train-score", "output_dir": "score", "dataset": {"phantoms": 32, "side": 4},
             "network": {"hidden": [16, 16], "embed_dim": 8}, "train": {"steps": 20, "batch_size": 8}}
    assert main(["run", _write(tmp_path, "t.yaml", train)]) == 0
    assert len((tmp_path / "score" / "losses.csv").read_text().splitlines()) == 21
    meas = {**MEAS, "measure": {**MEAS["measure"], "truth": {"phantom_seed": 2}, "sigma": 0.5}}
    meas.pop("prior")
    assert main(["run", _write(tmp_path, "m.yaml", meas)]) == 0
    infer = {**INFER, "prior": {"kind": "network", "checkpoint": "score/score"},
             "vi": {"max_steps": 10, "snapshot_every": 5, "lr": 0.01, "batch_size": 4}}
    assert main(["run", _write(tmp_path, "i.yaml", infer)]) == 0
    m = _metrics(tmp_path / "infer")
    assert m["steps"] == 10 and "kl_to_posterior" not in m


def test_infer_gmm_prior_reports_gmm_fit_kl(tmp_path):
    meas = {"kind": "make-measurements", "output_dir": "bmeas", "prior": {"kind": "bimodal"},
            "measure": {"operator": {"model_id": "linear", "matrix": [[1, 0]]},
                        "truth": {"values": [0.3, 0.0]}, "sigma": 0.7}}
    assert main(["run", _write(tmp_path, "b.yaml", meas)]) == 0
    infer = {"kind": "infer", "output_dir": "vi", "prior": {"kind": "bimodal"}, "bundle": "bmeas",
             "family": {"kind": "realnvp", "n_layers": 4},
             "vi": {"max_steps": 20, "snapshot_every": 10, "lr": 1e-3, "batch_size": 64}}
    assert main(["run", _write(tmp_path, "i.yaml", infer)]) == 0
    kl = _metrics(tmp_path / "vi")["kl_to_posterior"]
    assert np.isfinite(kl) and kl > 0
