import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy.stats import multivariate_normal

import spvi  # noqa: F401
from spvi.diffusion import VPSDE
from spvi.errors import DomainError, ObjectiveError, StepError
from spvi.evaluation import gaussian_kl, gaussian_posterior
from spvi.forward import Measurement
from spvi.optim import adam_init, adam_update, clip_by_global_norm, global_norm, step
from spvi.scores import GaussianPrior
from spvi.variational import DiagGaussian, init_family
from spvi.vi import (Problem, ScorePrior, ViConfig, converged, fit, make_prior_fn, objective,
                     snapshot_deltas)

PRIOR = GaussianPrior(np.array([0.2, -0.3]), np.diag([0.5, 0.3]))
Y = np.array([0.8, 0.1])
SIGMA = 0.4


def _denoise(sigma=SIGMA, values=Y):
    return Problem.from_measurement(Measurement(values, sigma, "denoise", {"shape": (2,)}))


def _score_prior():
    sde = VPSDE(dim=2)
    return ScorePrior(PRIOR.field(sde), sde)


def _posterior():
    return gaussian_posterior(PRIOR, np.eye(2), Y, SIGMA)


def _posterior_params():
    post = _posterior()
    return {"mu": jnp.asarray(post.mean), "sigma_raw": jnp.sqrt(jnp.diag(post.cov))}


# -- convergence rule ------------------------------------------------------------

def _snapshots_from_deltas(deltas):
    # consecutive snapshots along a fixed direction with prescribed relative changes
    snaps = [np.array([1.0, 0.0])]
    for d in deltas:
        snaps.append(snaps[-1] * (1.0 + d))
    return snaps


def test_converged_examples():
    assert converged(_snapshots_from_deltas([0.1, 0.0009, 0.0008]), 1e-3)
    assert not converged(_snapshots_from_deltas([0.0009, 0.1, 0.0008]), 1e-3)
    assert not converged(_snapshots_from_deltas([0.0005]), 1e-3)
    np.testing.assert_allclose(snapshot_deltas(_snapshots_from_deltas([0.1, 0.0009])), [0.1, 0.0009])


def test_zero_norm_snapshot_is_an_error():
    with pytest.raises(DomainError):
        snapshot_deltas([np.zeros(2), np.ones(2)])


def test_config_validation():
    for bad in ({"epsilon": 0.0}, {"epsilon": 1.0}, {"lr": 0.0}, {"batch_size": 0},
                {"prior_kind": "flow"}, {"clip": -1.0}):
        with pytest.raises(DomainError):
            ViConfig(**bad)


# -- optimizer step --------------------------------------------------------------

def test_zero_gradient_leaves_params_unchanged():
    params = {"a": jnp.array([1.0, -2.0]), "b": jnp.array(3.0)}
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    new, _ = step(adam_init(params), params, zeros, 1e-2, clip=1.0)
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])


def test_clip_bound():
    grad = {"a": jnp.array([3.0, 4.0]), "b": jnp.array([0.0])}
    clipped, norm = clip_by_global_norm(grad, 1.0)
    assert float(norm) == pytest.approx(5.0)
    assert float(global_norm(clipped)) == pytest.approx(1.0, rel=1e-12)
    small = {"a": jnp.array([0.3, 0.4])}
    kept, _ = clip_by_global_norm(small, 1.0)
    np.testing.assert_array_equal(kept["a"], small["a"])


def test_clip_happens_before_update():
    params = {"a": jnp.zeros(3)}
    grad = {"a": jnp.array([1e6, -1e6, 1e3])}
    clipped, _ = clip_by_global_norm(grad, 1.0)
    a, _ = adam_update(adam_init(params), params, grad, 0.1, clip=1.0)
    b, _ = adam_update(adam_init(params), params, clipped, 0.1)
    np.testing.assert_array_equal(a["a"], b["a"])


def test_nonfinite_gradient_raises():
    params = {"a": jnp.zeros(2)}
    with pytest.raises(StepError):
        step(adam_init(params), params, {"a": jnp.array([np.nan, 0.0])}, 1e-3)


# -- objective -------------------------------------------------------------------

def test_term_isolation_entropy_only():
    fam = DiagGaussian(2)
    params = {"mu": jnp.array([0.1, 0.2]), "sigma_raw": jnp.array([0.3, 0.5])}
    prob = _denoise(sigma=1e12)
    cfg = ViConfig(prior_kind="tv", tv_weight=0.0)
    prior_fn = make_prior_fn(cfg, None, (1, 2))
    key = jax.random.PRNGKey(0)
    val = float(objective(params, fam, prob, prior_fn, key, 512))
    _, logq = fam.sample(params, jax.random.split(key)[0], 512)
    assert val == pytest.approx(float(jnp.mean(logq)), abs=1e-12)
    # wider members have lower loss: the optimum is the maximal-entropy member
    wide = {"mu": params["mu"], "sigma_raw": params["sigma_raw"] * 3}
    assert float(objective(wide, fam, prob, prior_fn, key, 512)) < val


def test_conjugate_evidence():
    fam = DiagGaussian(2)
    params = _posterior_params()
    prior_fn = lambda x, key: PRIOR.log_prob(x)
    # the likelihood drops 1/2 sum log(2 pi sigma^2); the evidence oracle keeps it
    log_evidence = multivariate_normal(np.asarray(PRIOR.mean),
                                       np.asarray(PRIOR.cov) + SIGMA**2 * np.eye(2)).logpdf(Y)
    dropped = np.log(2 * np.pi * SIGMA**2)
    val = float(objective(params, fam, _denoise(), prior_fn, jax.random.PRNGKey(1), 256))
    assert val == pytest.approx(-log_evidence - dropped, abs=1e-10)
    # any other member pays KL(q || posterior) on top
    off = {"mu": params["mu"] + 0.1, "sigma_raw": params["sigma_raw"]}
    assert float(objective(off, fam, _denoise(), prior_fn, jax.random.PRNGKey(1), 4096)) > val


def test_exact_prior_objective_matches_analytic():
    fam = DiagGaussian(2)
    params = _posterior_params()
    key = jax.random.PRNGKey(2)
    cfg = ViConfig(prior_kind="exact", exact_trace=True)
    ode = float(objective(params, fam, _denoise(), make_prior_fn(cfg, _score_prior()), key, 32))
    ref = float(objective(params, fam, _denoise(), lambda x, k: PRIOR.log_prob(x), key, 32))
    assert abs(ode - ref) < 1e-2 * 2


def test_objective_gradient_matches_fd():
    fam = DiagGaussian(2)
    params = {"mu": jnp.array([0.5, -0.1]), "sigma_raw": jnp.array([0.4, 0.3])}
    prior_fn = make_prior_fn(ViConfig(), _score_prior())
    key = jax.random.PRNGKey(3)
    loss = jax.jit(lambda p: objective(p, fam, _denoise(), prior_fn, key, 64))
    grad = jax.grad(loss)(params)
    h = 1e-6
    for name in ("mu", "sigma_raw"):
        for i in range(2):
            e = jnp.zeros(2).at[i].set(h)
            up = dict(params, **{name: params[name] + e})
            dn = dict(params, **{name: params[name] - e})
            fd = (float(loss(up)) - float(loss(dn))) / (2 * h)
            assert abs(float(grad[name][i]) - fd) <= 0.02 * abs(fd) + 1e-8


def test_nan_objective_raises():
    prob = Problem(lambda x: jnp.sum(x) * jnp.nan, 2)
    with pytest.raises(ObjectiveError):
        fit(prob, _score_prior(), DiagGaussian(2), ViConfig(max_steps=3))


def test_nan_gradient_raises():
    @jax.custom_jvp
    def poisoned(x):
        return jnp.zeros(())

    @poisoned.defjvp
    def _(primals, tangents):
        return jnp.zeros(()), jnp.sum(tangents[0]) * jnp.nan

    prob = Problem(_denoise().log_likelihood, 2, penalty=poisoned)
    with pytest.raises(StepError):
        fit(prob, _score_prior(), DiagGaussian(2), ViConfig(max_steps=3))


# -- fit -------------------------------------------------------------------------

def test_max_steps_zero_returns_init():
    fam = DiagGaussian(2)
    p0 = fam.init()
    params, hist = fit(_denoise(), _score_prior(), fam, ViConfig(max_steps=0), params=p0)
    assert params is p0 and len(hist) == 0


def test_fit_is_deterministic():
    fam, _ = init_family("realnvp", 2, jax.random.PRNGKey(0), n_layers=4)
    cfg = ViConfig(lr=1e-3, batch_size=16, max_steps=20, snapshot_every=10, seed=4)
    p1, h1 = fit(_denoise(), _score_prior(), fam, cfg)
    p2, h2 = fit(_denoise(), _score_prior(), fam, cfg)
    assert h1.losses == h2.losses and h1.deltas == h2.deltas
    for a, b in zip(jax.tree_util.tree_leaves(p1), jax.tree_util.tree_leaves(p2)):
        assert np.array_equal(np.asarray(a), np.asarray(b))


def test_history_and_checkpoints(tmp_path):
    fam = DiagGaussian(2)
    cfg = ViConfig(lr=1e-2, batch_size=8, max_steps=25, snapshot_every=10)
    _, hist = fit(_denoise(), _score_prior(), fam, cfg, run_dir=tmp_path)
    assert hist.steps == list(range(1, 26))
    assert hist.snapshot_steps == [0, 10, 20] and len(hist.deltas) == 2
    assert hist.checkpoints == [f"checkpoints/step_{s}" for s in (0, 10, 20)]
    for ref in hist.checkpoints:
        assert (tmp_path / ref / "manifest.json").exists()
    hist.to_csv(tmp_path / "history.csv")
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0] == "step,loss,delta,ms_per_step" and len(lines) == 26
    assert lines[10].split(",")[2] != "" and lines[9].split(",")[2] == ""


@pytest.mark.slow
def test_exact_prior_conjugate_fit():
    fam = DiagGaussian(2)
    cfg = ViConfig(lr=1e-2, batch_size=32, max_steps=500, snapshot_every=500, prior_kind="exact",
                   exact_trace=True)
    params, _ = fit(_denoise(), _score_prior(), fam, cfg)
    post = _posterior()
    mu, sd = np.asarray(params["mu"]), np.asarray(fam.std(params))
    post_sd = np.sqrt(np.diag(post.cov))
    assert np.all(np.abs(mu - post.mean) <= 0.02 * np.sqrt(np.diag(PRIOR.cov)))
    assert np.all(np.abs(sd / post_sd - 1) <= 0.10)
    assert gaussian_kl(mu, np.diag(sd**2), post.mean, post.cov) <= 0.05
