"""Canonical synthetic problem instances with known ground truth."""

from __future__ import annotations

import dataclasses

import jax
import numpy as np
from scipy.ndimage import gaussian_filter

from spvi.evaluation import gaussian_posterior, gmm_posterior
from spvi.forward.measurement import Measurement, dense_matrix, simulate
from spvi.scores import GaussianPrior, GmmPrior


def bimodal_prior() -> GmmPrior:
    """``0.65 N([-1.5, 0], 0.3^2 I) + 0.35 N([1.5, 0], 0.3^2 I)``."""
    cov = 0.09 * np.eye(2)
    return GmmPrior([0.65, 0.35], [[-1.5, 0.0], [1.5, 0.0]], [cov, cov])


@dataclasses.dataclass(frozen=True, eq=False)
class BimodalInstance:
    prior: GmmPrior
    A: np.ndarray
    y: np.ndarray
    sigma_y: float
    posterior: GmmPrior

    @property
    def measurement(self) -> Measurement:
        return Measurement(self.y, self.sigma_y, "linear", {"matrix": self.A})


def bimodal_instance(y: float = 0.3, sigma_y: float = 0.7) -> BimodalInstance:
    """Projection onto the first coordinate of a two-mode mixture.

    With ``y = 0.3`` the posterior keeps both modes, reweighted to about
    0.28 / 0.72 so that the minority prior mode becomes the majority.
    """
    prior = bimodal_prior()
    A = np.array([[1.0, 0.0]])
    yv = np.array([y])
    return BimodalInstance(prior, A, yv, sigma_y, gmm_posterior(prior, A, yv, sigma_y))


def smooth_covariance(side: int, length: float = 0.5, variance: float = 0.02,
                      nugget: float = 0.03) -> np.ndarray:
    """Squared-exponential covariance over a ``side x side`` pixel grid plus a nugget."""
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    pts = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(float)
    d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1)
    return variance * np.exp(-0.5 * d2 / length**2) + nugget * np.eye(side * side)


@dataclasses.dataclass(frozen=True, eq=False)
class ConjugateInstance:
    prior: GaussianPrior
    truth: np.ndarray
    measurement: Measurement
    A: np.ndarray
    posterior: GaussianPrior
    shape: tuple


def conjugate_lowfreq_instance(side: int = 4, fraction: float = 0.25, sigma_y: float = 2.0,
                               seed: int = 0, **cov_kwargs) -> ConjugateInstance:
    """Gaussian image prior, low-frequency DFT measurements, closed-form posterior."""
    cov = smooth_covariance(side, **cov_kwargs)
    prior = GaussianPrior(np.full(side * side, 0.5), cov)
    k_truth, k_noise = jax.random.split(jax.random.PRNGKey(seed))
    truth = np.asarray(prior.sample(k_truth, 1)[0])
    meta = {"shape": (side, side), "fraction": fraction}
    y = simulate("lowfreq", truth, sigma_y, k_noise, meta)
    A = dense_matrix(y)
    post = gaussian_posterior(prior, A, y.values, y.noise_sigma)
    return ConjugateInstance(prior, truth, y, A, post, (side, side))


def diag_kl_floor(cov) -> float:
    """Smallest ``KL(q || N(m, cov))`` over diagonal Gaussians ``q``.

    The optimum matches the mean and uses variances ``1 / Lambda_ii``.
    """
    prec = np.linalg.inv(np.asarray(cov))
    return float(0.5 * (np.sum(np.log(np.diag(prec))) - np.linalg.slogdet(prec)[1]))


def phantoms(n: int, side: int, rng: np.random.Generator, n_blobs: int = 4,
             smooth: float = 1.0) -> np.ndarray:
    """Smooth synthetic images in [0, 1]: a few Gaussian blobs, blurred.

    Returns an array of shape ``(n, side, side)``.
    """
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    out = np.empty((n, side, side))
    for k in range(n):
        img = np.zeros((side, side))
        for _ in range(n_blobs):
            ci, cj = rng.uniform(0.2 * side, 0.8 * side, size=2)
            width = rng.uniform(0.12 * side, 0.3 * side)
            amp = rng.uniform(0.3, 1.0)
            img += amp * np.exp(-0.5 * ((ii - ci) ** 2 + (jj - cj) ** 2) / width**2)
        img = gaussian_filter(img, smooth)
        out[k] = img / max(img.max(), 1e-12)
    return out
