import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

import spvi  # noqa: F401
from spvi.errors import DomainError, FitError, ShapeError
from spvi.evaluation import (coverage_3sigma, fit_gmm2, gaussian_kl, gaussian_posterior,
                             gmm_posterior, psnr, reverse_kl, ssim, write_metrics)
from spvi.problems import bimodal_instance
from spvi.scores import GaussianPrior, GmmPrior


def _mixture_samples(rng, n, w, means, covs):
    comp = rng.random(n) < w[0]
    a = rng.multivariate_normal(means[0], covs[0], n)
    b = rng.multivariate_normal(means[1], covs[1], n)
    return np.where(comp[:, None], a, b)


# -- GMM fit ---------------------------------------------------------------------

def test_gmm2_recovers_known_weights():
    rng = np.random.default_rng(0)
    means = [np.array([-1.0, 0.5]), np.array([1.5, -0.5])]
    covs = [np.array([[0.2, 0.05], [0.05, 0.1]]), 0.15 * np.eye(2)]
    x = _mixture_samples(rng, 10_000, [0.3, 0.7], means, covs)
    fit = fit_gmm2(x, np.random.default_rng(1))
    order = np.argsort(fit.means[:, 0])
    np.testing.assert_allclose(fit.weights[order], [0.3, 0.7], atol=0.02)
    np.testing.assert_allclose(fit.weights.sum(), 1.0)
    for c in fit.covs:
        assert np.all(np.linalg.eigvalsh(c) > 0)


def test_gmm2_agrees_with_sklearn():
    from sklearn.mixture import GaussianMixture

    x = _mixture_samples(np.random.default_rng(8), 5000, [0.4, 0.6],
                         [np.array([-1.0, 0.0]), np.array([1.0, 0.5])],
                         [0.2 * np.eye(2), np.array([[0.3, 0.1], [0.1, 0.2]])])
    ours = fit_gmm2(x, np.random.default_rng(0))
    ref = GaussianMixture(2, tol=1e-10, max_iter=500, n_init=10, reg_covar=1e-9,
                          random_state=0).fit(x)
    a, b = np.argsort(ours.means[:, 0]), np.argsort(ref.means_[:, 0])
    np.testing.assert_allclose(ours.weights[a], ref.weights_[b], atol=1e-4)
    np.testing.assert_allclose(ours.means[a], ref.means_[b], atol=1e-4)
    np.testing.assert_allclose(ours.covs[a], ref.covariances_[b], atol=1e-4)
    assert ours.loglik_trace[-1] == pytest.approx(ref.score(x), abs=1e-6)


def test_gmm2_unimodal_data_merges():
    x = np.random.default_rng(2).normal(size=(10_000, 2))
    fit = fit_gmm2(x, np.random.default_rng(3))
    merged = np.linalg.norm(fit.means[0] - fit.means[1]) < 0.1
    assert merged or fit.weights.min() < 0.05


def test_gmm2_deterministic_and_monotone_em():
    x = _mixture_samples(np.random.default_rng(4), 2000, [0.5, 0.5],
                         [np.array([-1.0, 0.0]), np.array([1.0, 0.0])], [0.3 * np.eye(2)] * 2)
    a = fit_gmm2(x, np.random.default_rng(5))
    b = fit_gmm2(x.copy(), np.random.default_rng(5))
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert np.all(np.diff(a.loglik_trace) >= -1e-12)


def test_gmm2_errors():
    with pytest.raises(DomainError):
        fit_gmm2(np.zeros((50, 2)), np.random.default_rng(0))
    with pytest.raises(FitError):
        fit_gmm2(np.zeros((200, 2)), np.random.default_rng(0))


# -- reverse KL ------------------------------------------------------------------

def test_reverse_kl_identity_is_zero():
    x = np.random.default_rng(0).normal(size=(100, 2))
    lp = lambda s: multivariate_normal(np.zeros(2), np.eye(2)).logpdf(s)
    assert reverse_kl(x, lp, lp) == 0.0


def test_reverse_kl_closed_form_1d():
    sigma = 1.5
    std, wide = norm(0, 1), norm(0, sigma)
    # samples from N(0, 1) scored against N(0, sigma^2)
    x = np.random.default_rng(1).normal(size=10_000)
    kl, se = reverse_kl(x, std.logpdf, wide.logpdf, return_se=True)
    oracle = np.log(sigma) + 1 / (2 * sigma**2) - 0.5
    assert oracle == pytest.approx(0.1277, abs=1e-4)
    assert abs(kl - oracle) < 3 * se
    # the opposite orientation: samples from N(0, sigma^2) scored against N(0, 1)
    x = np.random.default_rng(2).normal(scale=sigma, size=10_000)
    kl, se = reverse_kl(x, wide.logpdf, std.logpdf, return_se=True)
    assert abs(kl - (-np.log(sigma) + sigma**2 / 2 - 0.5)) < 3 * se


def test_reverse_kl_rejects_nonfinite():
    with pytest.raises(DomainError):
        reverse_kl(np.zeros(3), lambda s: np.full(3, -np.inf), lambda s: np.zeros(3))


def test_gaussian_kl_closed_form():
    assert gaussian_kl([0.0], [[1.0]], [0.0], [[1.0]]) == 0.0
    assert gaussian_kl([0.0], [[2.25]], [0.0], [[1.0]]) == pytest.approx(
        np.log(1 / 1.5) + 2.25 / 2 - 0.5)


# -- conjugate posteriors --------------------------------------------------------

def test_gaussian_posterior_standard_case():
    y = np.array([0.6, -1.0, 2.0])
    post = gaussian_posterior(GaussianPrior(np.zeros(3), np.eye(3)), np.eye(3), y, 1.0)
    np.testing.assert_allclose(post.mean, y / 2, atol=1e-12)
    np.testing.assert_allclose(post.cov, np.eye(3) / 2, atol=1e-12)


def test_gaussian_posterior_uninformative_noise():
    prior = GaussianPrior(np.array([0.3, -0.2]), np.array([[0.5, 0.2], [0.2, 0.4]]))
    post = gaussian_posterior(prior, np.array([[1.0, 2.0]]), np.array([5.0]), 1e8)
    np.testing.assert_allclose(post.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(post.cov, prior.cov, atol=1e-12)
    with pytest.raises(ShapeError):
        gaussian_posterior(prior, np.eye(3), np.zeros(3), 1.0)
    with pytest.raises(DomainError):
        gaussian_posterior(prior, np.eye(2), np.zeros(2), 0.0)


def test_gmm_posterior_single_component_and_symmetry():
    m, c = np.array([0.4, -0.1]), np.array([[0.3, 0.1], [0.1, 0.2]])
    A, y = np.array([[1.0, -1.0]]), np.array([0.2])
    single = gmm_posterior(GmmPrior([1.0], [m], [c]), A, y, 0.5)
    ref = gaussian_posterior(GaussianPrior(m, c), A, y, 0.5)
    np.testing.assert_allclose(single.means[0], ref.mean, atol=1e-12)
    np.testing.assert_allclose(single.covs[0], ref.cov, atol=1e-12)
    mu = np.array([1.0, 0.0])
    sym = gmm_posterior(GmmPrior([0.2, 0.8], [mu, -mu], [0.1 * np.eye(2)] * 2),
                        np.array([[1.0, 0.0]]), np.array([0.0]), 0.7)
    np.testing.assert_allclose(sym.weights, [0.2, 0.8], atol=1e-12)


def _grid_posterior(prior_pdf, A, y, sigma, lim=4.0, n=400):
    g = np.linspace(-lim, lim, n)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], 1)
    like = norm(0, sigma).pdf(y[0] - pts @ A[0])
    w = prior_pdf(pts) * like
    return pts, w / w.sum()


def test_gmm_posterior_matches_grid_quadrature():
    inst = bimodal_instance()
    prior = inst.prior
    prior_pdf = lambda p: sum(w * multivariate_normal(m, c).pdf(p)
                              for w, m, c in zip(np.asarray(prior.weights), np.asarray(prior.means),
                                                 np.asarray(prior.covs)))
    pts, grid = _grid_posterior(prior_pdf, inst.A, inst.y, inst.sigma_y)
    dens = np.exp(np.asarray(inst.posterior.log_prob(pts)))
    dens /= dens.sum()
    assert 0.5 * np.abs(dens - grid).sum() < 1e-3


def test_bimodal_instance_weights():
    # oracle: mode weights by 1D quadrature of prior weight times marginal evidence
    inst = bimodal_instance()
    ev = [0.65 * norm(-1.5, np.sqrt(0.09 + 0.49)).pdf(0.3),
          0.35 * norm(1.5, np.sqrt(0.09 + 0.49)).pdf(0.3)]
    oracle = np.array(ev) / sum(ev)
    np.testing.assert_allclose(np.asarray(inst.posterior.weights), oracle, rtol=1e-10)
    assert 0.2 < oracle[0] < 0.35


# -- image metrics ---------------------------------------------------------------

def test_psnr_and_ssim_examples():
    img = np.random.default_rng(0).random((16, 16))
    assert psnr(img, img) == 100.0
    assert ssim(img, img) == pytest.approx(1.0)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    other = np.clip(img + 0.1 * np.random.default_rng(1).normal(size=img.shape), 0, 1)
    assert ssim(img, other, 1.0) == pytest.approx(ssim(other, img, 1.0), abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(img, img[:3])
    with pytest.raises(ShapeError):
        ssim(img, img.T[:8])


def test_coverage_examples():
    mean = np.linspace(0, 1, 50)
    std = np.full(50, 0.1)
    assert coverage_3sigma(mean, mean, std) == 1.0
    assert coverage_3sigma(mean + 4 * std, mean, std) == 0.0
    with pytest.raises(DomainError):
        coverage_3sigma(mean, mean, np.zeros(50))


def test_coverage_binomial_oracle():
    rng = np.random.default_rng(7)
    n = 100_000
    mean, std = rng.normal(size=n), rng.uniform(0.1, 2.0, size=n)
    truth = mean + std * rng.normal(size=n)
    p = 2 * norm.cdf(3) - 1
    assert p == pytest.approx(0.9973, abs=1e-4)
    assert abs(coverage_3sigma(truth, mean, std) - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_metrics_csv(tmp_path):
    write_metrics(tmp_path / "m.csv", [("run", "kl", 0.25, 10, 3)])
    assert (tmp_path / "m.csv").read_text().splitlines() == ["run_id,metric,value,n,seed",
                                                             "run,kl,0.25,10,3"]
