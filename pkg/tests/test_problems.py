import numpy as np
import pytest
from scipy.stats import multivariate_normal

import spvi  # noqa: F401
from spvi.evaluation import gaussian_kl
from spvi.forward.measurement import dense_matrix
from spvi.problems import (bimodal_instance, conjugate_lowfreq_instance, diag_kl_floor, phantoms,
                           smooth_covariance)


def test_phantoms_range_shape_and_seed():
    a = phantoms(5, 16, np.random.default_rng(0))
    b = phantoms(5, 16, np.random.default_rng(0))
    assert a.shape == (5, 16, 16) and np.array_equal(a, b)
    assert a.min() >= 0 and np.allclose(a.max(axis=(1, 2)), 1.0)


def test_smooth_covariance_is_spd_and_stationary():
    c = smooth_covariance(4)
    assert np.all(np.linalg.eigvalsh(c) > 0.03 - 1e-12)
    np.testing.assert_allclose(np.diag(c), 0.05)
    assert c[0, 1] == pytest.approx(0.02 * np.exp(-2.0))


def test_diag_kl_floor_matches_brute_force():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + 0.5 * np.eye(3)
    # the optimal diagonal q has variances 1 / Lambda_ii
    best = gaussian_kl(np.zeros(3), np.diag(1 / np.diag(np.linalg.inv(cov))), np.zeros(3), cov)
    assert diag_kl_floor(cov) == pytest.approx(best, abs=1e-12)
    for _ in range(50):
        other = np.diag(np.exp(rng.normal(size=3)))
        assert gaussian_kl(np.zeros(3), other, np.zeros(3), cov) >= best - 1e-12
    assert diag_kl_floor(np.diag([0.3, 2.0])) == pytest.approx(0.0, abs=1e-12)


def test_conjugate_instance_is_consistent():
    inst = conjugate_lowfreq_instance()
    assert inst.shape == (4, 4) and inst.measurement.dim == 8
    A = dense_matrix(inst.measurement)
    prec = np.linalg.inv(inst.prior.cov) + A.T @ A / 4.0
    np.testing.assert_allclose(inst.posterior.cov, np.linalg.inv(prec), atol=1e-10)
    assert diag_kl_floor(inst.posterior.cov) < 0.05


def test_bimodal_posterior_density_matches_bayes_rule():
    inst = bimodal_instance()
    pts = np.random.default_rng(2).normal(size=(20, 2))
    prior = sum(w * multivariate_normal(m, c).pdf(pts) for w, m, c in
                zip(np.asarray(inst.prior.weights), np.asarray(inst.prior.means),
                    np.asarray(inst.prior.covs)))
    like = multivariate_normal(inst.y, inst.sigma_y**2).pdf(pts @ inst.A.T)
    log_unnorm = np.log(prior * like)
    diff = np.asarray(inst.posterior.log_prob(pts)) - log_unnorm
    np.testing.assert_allclose(diff, diff[0], atol=1e-10)
