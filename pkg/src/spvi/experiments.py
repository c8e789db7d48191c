"""Experiment bodies behind ``spvi run``.

Each function takes a validated ``RunConfig`` and an output directory, writes
its artifacts there, and returns metric rows ``(run_id, metric, value, n, seed)``,
optionally paired with extra manifest entries as ``(rows, dict)``.
Timing never enters the metric rows, so identical configs give identical
``metrics.csv`` files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from spvi.baselines import WEIGHT_SEMANTICS, LinearGaussianProblem, SweepGrid, default_grid, run_sweep
from spvi.bundle import load_bundle, save_bundle
from spvi.config import (BimodalPriorCfg, GaussianPriorCfg, GmmPriorCfg, NetworkPriorCfg,
                         RunConfig, SmoothPriorCfg)
from spvi.diffusion import VPSDE
from spvi.errors import DomainError, ShapeError
from spvi.evaluation import (coverage_3sigma, fit_gmm2, gaussian_kl, gaussian_posterior,
                             gmm_posterior, psnr, reverse_kl, ssim)
from spvi.forward import vlbi
from spvi.forward.masks import poisson_disc_mask
from spvi.forward.measurement import Measurement, dense_matrix, make_forward, simulate
from spvi.io import load_checkpoint, read_json, read_tensor, save_checkpoint, write_tensor
from spvi.priors import OdeConfig, SurrogateConfig, bound_gap_probe
from spvi.problems import bimodal_prior, phantoms, smooth_covariance
from spvi.scores import DsmSchedule, GaussianPrior, GmmPrior, ScoreNet, train_dsm
from spvi.variational import init_family
from spvi.vi import Problem, ScorePrior, ViConfig, checkpoint_manifest, fit

N_POSTERIOR_SAMPLES = 128
N_KL_SAMPLES = 10_000


def make_sde(cfg: RunConfig, dim: int) -> VPSDE:
    d = cfg.diffusion
    return VPSDE(beta_min=d.beta_min, beta_max=d.beta_max, dim=dim, t_eps=d.t_eps)


def analytic_prior(cfg: RunConfig):
    p = cfg.prior
    if isinstance(p, GaussianPriorCfg):
        return GaussianPrior(p.mean, p.cov)
    if isinstance(p, GmmPriorCfg):
        return GmmPrior(p.weights, p.means, p.covs)
    if isinstance(p, BimodalPriorCfg):
        return bimodal_prior()
    if isinstance(p, SmoothPriorCfg):
        cov = smooth_covariance(p.side, p.length, p.variance, p.nugget)
        return GaussianPrior(np.full(p.side * p.side, p.mean), cov)
    return None


def load_score_prior(cfg: RunConfig, dim: int):
    """``(ScorePrior, analytic prior or None)`` for the configured prior source."""
    analytic = analytic_prior(cfg)
    if analytic is not None:
        if analytic.dim != dim:
            raise ShapeError(f"prior dimension {analytic.dim} does not match problem dimension {dim}")
        sde = make_sde(cfg, dim)
        return ScorePrior(analytic.field(sde), sde), analytic
    if isinstance(cfg.prior, NetworkPriorCfg):
        ckpt = Path(cfg.prior.checkpoint)
        if not (ckpt / "manifest.json").exists():
            raise FileNotFoundError(f"score checkpoint not found: {ckpt}")
        m = read_json(ckpt / "manifest.json")
        if m["dim"] != dim:
            raise ShapeError(f"score network dimension {m['dim']} does not match problem dimension {dim}")
        net = ScoreNet(m["dim"], tuple(m["hidden"]), m["embed_dim"], m["activation"])
        params, _ = load_checkpoint(ckpt, net.init(jax.random.PRNGKey(0)))
        sde = VPSDE(m["beta_min"], m["beta_max"], m["dim"], m["t_eps"])
        return ScorePrior(net.field(params, sde), sde), None
    raise DomainError("no prior configured")


def _rows(cfg, items, n=1):
    return [(cfg.kind, name, float(value), n, cfg.seed) for name, value in items]


# -- train-score ----------------------------------------------------------------

def train_score(cfg: RunConfig, out: Path):
    ds = cfg.dataset
    if ds.path is not None:
        data = read_tensor(ds.path).astype(float)
        image_shape = list(data.shape[1:])
        data = data.reshape(data.shape[0], -1)
    else:
        imgs = phantoms(ds.phantoms, ds.side, np.random.default_rng(cfg.seed))
        image_shape = [ds.side, ds.side]
        data = imgs.reshape(ds.phantoms, -1)
    dim = data.shape[1]
    net = ScoreNet(dim, tuple(cfg.network.hidden), cfg.network.embed_dim, cfg.network.activation)
    sde = make_sde(cfg, dim)
    t = cfg.train
    res = train_dsm(data, net, sde, DsmSchedule(t.lr, t.steps, t.batch_size, t.clip),
                    jax.random.PRNGKey(cfg.seed))
    save_checkpoint(out / "score", res.params, {
        "kind": "score_net", "dim": dim, "hidden": list(net.hidden), "embed_dim": net.embed_dim,
        "activation": net.activation, "beta_min": sde.beta_min, "beta_max": sde.beta_max,
        "t_eps": sde.t_eps, "steps": t.steps, "image_shape": image_shape,
    })
    with (out / "losses.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(res.losses, 1):
            writer.writerow([i, repr(float(loss))])
    tail = res.losses[-100:] if len(res.losses) else np.array([np.nan])
    return _rows(cfg, [("dsm_loss_final", float(np.mean(tail)))], len(tail))


# -- make-measurements ----------------------------------------------------------

def _truth(cfg: RunConfig, dim: int | None, shape):
    tc = cfg.measure.truth
    if tc.path is not None:
        return read_tensor(tc.path).astype(float).ravel()
    if tc.values is not None:
        return np.asarray(tc.values, dtype=float)
    if tc.phantom_seed is not None:
        if shape is None or len(shape) != 2 or shape[0] != shape[1]:
            raise DomainError("phantom truth needs a square 2D operator shape")
        return phantoms(1, shape[0], np.random.default_rng(tc.phantom_seed))[0].ravel()
    prior = analytic_prior(cfg)
    if prior is None:
        raise DomainError("prior_sample_seed needs an analytic prior")
    return np.asarray(prior.sample(jax.random.PRNGKey(tc.prior_sample_seed), 1)[0])


def make_measurements(cfg: RunConfig, out: Path):
    op = cfg.measure.operator
    shape = tuple(op.shape) if op.shape else None
    meta: dict = {}
    if shape is not None:
        meta["shape"] = shape
    if op.model_id == "lowfreq":
        meta["fraction"] = op.fraction
    elif op.model_id == "mri":
        meta["mask"] = poisson_disc_mask(shape, op.accel, np.random.default_rng(cfg.seed))
    elif op.model_id == "linear":
        meta["matrix"] = np.asarray(op.matrix, dtype=float)
    elif op.model_id in ("vlbi_vis", "vlbi_closure"):
        meta["coverage"] = vlbi.read_coverage(op.coverage)
        meta["fov_uas"] = op.fov_uas
    # round to the stored precision so the bundle is consistent with its own truth tensor
    truth = _truth(cfg, None, shape).astype(np.float32).astype(float)
    if shape is not None and truth.size != int(np.prod(shape)):
        raise ShapeError(f"truth has {truth.size} values, operator expects shape {shape}")
    if op.model_id == "denoise" and shape is None:
        meta["shape"] = (truth.size,)
    sigma = cfg.measure.sigma
    key = jax.random.PRNGKey(cfg.seed)
    if sigma > 0:
        y = simulate(op.model_id, truth, sigma, key, meta)
        save_bundle(out, y, truth, {"sigma": sigma, "seed": cfg.seed})
    else:
        # noiseless bundle: values are the exact forward output, noise recorded as 0
        if op.model_id == "vlbi_closure":
            meta["design"] = vlbi.closure_design(meta["coverage"])
        clean = np.asarray(make_forward(op.model_id, meta)(jnp.asarray(truth)))
        y = Measurement(clean, 1.0, op.model_id, meta)
        save_bundle(out, y, truth, {"sigma": 0.0, "seed": cfg.seed})
        write_tensor(out / "noise_sigma.spvi", np.zeros_like(clean))
    return _rows(cfg, [("n_values", y.dim), ("sigma", sigma)])


# -- infer ----------------------------------------------------------------------

def _vi_config(cfg: RunConfig) -> ViConfig:
    v = cfg.vi
    return ViConfig(lr=v.lr, clip=v.clip, batch_size=v.batch_size, max_steps=v.max_steps,
                    snapshot_every=v.snapshot_every, epsilon=v.epsilon, prior_kind=v.prior_kind,
                    n_time=v.n_time, n_noise=v.n_noise, n_trace=v.n_trace,
                    exact_trace=v.exact_trace, tv_weight=v.tv_weight,
                    norm_momentum=v.norm_momentum, seed=cfg.seed, snapshot_seed=cfg.seed + 1)


def _family(cfg: RunConfig, dim: int):
    f = cfg.family
    key = jax.random.PRNGKey(cfg.seed)
    if f.kind == "diag_gaussian":
        return init_family("diag_gaussian", dim, key, init_mean=f.init_mean, init_std=f.init_std)
    return init_family("realnvp", dim, key, n_layers=f.n_layers, width=f.width)


def infer(cfg: RunConfig, out: Path):
    y, truth = load_bundle(cfg.bundle)
    penalty = None
    if cfg.vi.flux_weight > 0:
        if cfg.vi.flux_target is None:
            raise DomainError("flux_weight needs flux_target")
        penalty = lambda x: vlbi.flux_penalty(x, cfg.vi.flux_target, cfg.vi.flux_weight)
    problem = Problem.from_measurement(y, penalty=penalty)
    vcfg = _vi_config(cfg)
    prior = None
    analytic = None
    if vcfg.prior_kind != "tv":
        prior, analytic = load_score_prior(cfg, problem.dim)
    family, params0 = _family(cfg, problem.dim)
    params, hist = fit(problem, prior, family, vcfg, params=params0, run_dir=out)
    hist.to_csv(out / "history.csv")
    save_checkpoint(out / "checkpoints" / "final", params, checkpoint_manifest(family, len(hist)))

    k_post = jax.random.PRNGKey(cfg.seed + 2)
    x, logq = family.sample(params, k_post, N_POSTERIOR_SAMPLES)
    x = np.asarray(x)
    mean, std = x.mean(axis=0), x.std(axis=0, ddof=1)
    shape = problem.shape or (problem.dim,)
    write_tensor(out / "posterior_mean.spvi", mean.reshape(shape))
    write_tensor(out / "posterior_std.spvi", std.reshape(shape))

    rows = [("steps", len(hist)), ("converged", float(hist.converged))]
    if len(hist):
        rows.append(("loss_smoothed_final", hist.smoothed[-1]))
    if truth is not None:
        rng = float(truth.max() - truth.min()) or 1.0
        rows.append(("psnr_mean", psnr(truth, mean, rng)))
        rows.append(("coverage_3sigma", coverage_3sigma(truth, mean, std)))
    if isinstance(analytic, GaussianPrior) and y.model_id != "vlbi_closure":
        post = gaussian_posterior(analytic, dense_matrix(y), y.values, y.noise_sigma)
        if family.kind == "diag_gaussian":
            kl = gaussian_kl(params["mu"], np.diag(np.asarray(family.std(params)) ** 2),
                             post.mean, post.cov)
        else:
            xs, lq = family.sample(params, jax.random.PRNGKey(cfg.seed + 3), 4096)
            kl = reverse_kl(np.asarray(xs), lambda _: np.asarray(lq),
                            lambda s: np.asarray(post.log_prob(jnp.asarray(s))))
        rows.append(("kl_to_posterior", kl))
    elif isinstance(analytic, GmmPrior) and y.model_id != "vlbi_closure":
        # GMM-fit protocol, the same one the baseline sweeps are scored with
        post = gmm_posterior(analytic, dense_matrix(y), y.values, y.noise_sigma)
        xs, _ = family.sample(params, jax.random.PRNGKey(cfg.seed + 3), N_KL_SAMPLES)
        xs = np.asarray(xs)
        gmm = fit_gmm2(xs, np.random.default_rng(cfg.seed + 3))
        rows.append(("kl_to_posterior", reverse_kl(xs, gmm.log_density,
                                                   lambda s: np.asarray(post.log_prob(s)))))
    return _rows(cfg, rows, N_POSTERIOR_SAMPLES)


# -- baseline-sweep -------------------------------------------------------------

def baseline_sweep(cfg: RunConfig, out: Path):
    y, _ = load_bundle(cfg.bundle)
    if y.model_id == "vlbi_closure":
        raise DomainError("baselines need a linear forward operator")
    A = dense_matrix(y)
    prior = analytic_prior(cfg)
    if prior is None:
        raise DomainError("the sweep needs an analytic prior for its true posterior")
    sigma = float(y.noise_sigma[0])
    post = (gmm_posterior if isinstance(prior, GmmPrior) else gaussian_posterior)(prior, A, y.values, sigma)
    sde = make_sde(cfg, prior.dim)
    lgp = LinearGaussianProblem(A, y.values, sigma, post)
    rows = []
    path = out / "sweep.csv"
    path.unlink(missing_ok=True)
    for method in cfg.sweep.methods:
        grid = SweepGrid(method, tuple(default_grid(method, cfg.sweep.n_values)), cfg.sweep.n_samples)
        res = run_sweep(grid, lgp, prior.field(sde), sde, seed=cfg.seed, n_steps=cfg.sweep.n_steps,
                        keep_samples=True)
        res.to_csv(path, append=True)
        for i, x in enumerate(res.samples):
            write_tensor(out / "samples" / f"{method}_{i:03d}.spvi", x)
        rows += [(f"{method}", "oracle_kl", res.oracle_kl, grid.n_samples, cfg.seed),
                 (f"{method}", "oracle_weight", res.oracle_value, grid.n_samples, cfg.seed),
                 (f"{method}", "bracketed", float(res.bracketed), len(grid.values), cfg.seed)]
    return rows, {"weight_semantics": WEIGHT_SEMANTICS}


# -- probe-bound ----------------------------------------------------------------

def probe_bound(cfg: RunConfig, out: Path):
    pc = cfg.probe
    key = jax.random.PRNGKey(cfg.seed)
    k_samp, k_probe = jax.random.split(key)
    if pc.source_run is not None:
        manifest = read_json(Path(pc.source_run) / "checkpoints" / "final" / "manifest.json")
        dim = manifest["dim"]
        kwargs = {"n_layers": manifest["n_layers"], "width": manifest["width"]} \
            if manifest["family"] == "realnvp" else {}
        family, template = init_family(manifest["family"], dim, jax.random.PRNGKey(0), **kwargs)
        params, _ = load_checkpoint(Path(pc.source_run) / "checkpoints" / "final", template)
        samples, _ = family.sample(params, k_samp, pc.n_samples)
    else:
        analytic = analytic_prior(cfg)
        if analytic is None:
            raise DomainError("probe-bound needs source_run or an analytic prior")
        dim = analytic.dim
        samples = analytic.sample(k_samp, pc.n_samples)
    prior, _ = load_score_prior(cfg, dim)
    table = bound_gap_probe(prior.score, prior.sde, samples, pc.n_repeats, k_probe,
                            SurrogateConfig(n_time=pc.n_time), OdeConfig(n_trace=pc.n_trace))
    table.to_csv(out / "boundgap.csv")
    holds = table.bound_holds()
    return _rows(cfg, [("bound_holds_fraction", float(np.mean(holds))),
                       ("n_values", len(table))], pc.n_samples)


# -- evaluate -------------------------------------------------------------------

def evaluate(cfg: RunConfig, out: Path):
    run = Path(cfg.run)
    if not (run / "manifest.json").exists():
        raise FileNotFoundError(f"no completed run at {run}")
    src = read_json(run / "manifest.json")
    mean = read_tensor(run / "posterior_mean.spvi").astype(float)
    std = read_tensor(run / "posterior_std.spvi").astype(float)
    bundle = src["config"].get("bundle")
    if bundle is None:
        raise DomainError("the evaluated run has no measurement bundle")
    _, truth = load_bundle(bundle)
    if truth is None:
        raise DomainError("the bundle stores no ground truth")
    truth = truth.reshape(mean.shape)
    rng = float(truth.max() - truth.min()) or 1.0
    rows = [("psnr", psnr(truth, mean, rng)), ("coverage_3sigma", coverage_3sigma(truth, mean, std))]
    if mean.ndim == 2 and min(mean.shape) >= 7:
        rows.append(("ssim", ssim(truth, mean, rng)))
    return _rows(cfg, rows, N_POSTERIOR_SAMPLES)


EXPERIMENTS = {
    "train-score": train_score,
    "make-measurements": make_measurements,
    "infer": infer,
    "baseline-sweep": baseline_sweep,
    "probe-bound": probe_bound,
    "evaluate": evaluate,
}
