"""Metrics and analytic ground truths.

Includes the two-component GMM fit used to turn samples into a density for
reverse-KL estimation, conjugate Gaussian / Gaussian-mixture posteriors for
linear measurements, and image-quality metrics.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp
from skimage.metrics import structural_similarity

from spvi.diffusion import LOG_2PI
from spvi.errors import DomainError, FitError, ShapeError
from spvi.scores import GaussianPrior, GmmPrior


@dataclasses.dataclass
class Gmm2Fit:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    loglik_trace: np.ndarray

    def component_log_prob(self, x):
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], len(self.weights)))
        for k, (m, c) in enumerate(zip(self.means, self.covs)):
            sign, logdet = np.linalg.slogdet(c)
            if sign <= 0:
                raise np.linalg.LinAlgError("covariance is not positive definite")
            diff = x - m
            maha = np.sum((diff @ np.linalg.inv(c)) * diff, axis=1)
            out[:, k] = -0.5 * (x.shape[1] * LOG_2PI + logdet + maha)
        return out

    def log_density(self, x):
        return logsumexp(self.component_log_prob(x) + np.log(self.weights), axis=1)


def _kmeans_init(x, rng, n_iter=10):
    first = x[rng.integers(len(x))]
    d2 = np.sum((x - first) ** 2, axis=1)
    p = d2 / d2.sum() if d2.sum() > 0 else np.full(len(x), 1.0 / len(x))
    centers = np.stack([first, x[rng.choice(len(x), p=p)]])
    for _ in range(n_iter):
        labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for k in range(2):
            if np.any(labels == k):
                centers[k] = x[labels == k].mean(axis=0)
    return labels


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0)
    means = (resp.T @ x) / nk[:, None]
    diff = x[None] - means[:, None]
    covs = jnp.einsum("nk,knd,kne->kde", resp, diff, diff) / nk[:, None, None]
    return nk, nk / x.shape[0], means, covs + reg * jnp.eye(x.shape[1])


def _e_step(x, weights, means, covs):
    chol = jnp.linalg.cholesky(covs)
    diff = x[None] - means[:, None]
    sol = jax.scipy.linalg.solve_triangular(chol, diff.transpose(0, 2, 1), lower=True)
    logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(chol, axis1=1, axis2=2)), axis=1)
    logp = -0.5 * (x.shape[1] * LOG_2PI + logdet[:, None] + jnp.sum(sol**2, axis=1))
    return logp.T + jnp.log(weights)  # (n, 2)


@functools.partial(jax.jit, static_argnames="max_iter")
def _em_loop(x, resp, tol, reg, max_iter):
    n, d = x.shape

    def body(state):
        i, resp, trace, _, _, _ = state
        nk, weights, means, covs = _m_step(x, resp, reg)
        bad = jnp.any(nk < d + 1) | (jnp.min(jnp.linalg.eigvalsh(covs)) <= 10 * reg)
        logp = _e_step(x, weights, means, covs)
        total = jnp.logaddexp(logp[:, 0], logp[:, 1])
        trace = trace.at[i].set(total.mean())
        stop = bad | ((i > 0) & (trace[i] - trace[jnp.maximum(i - 1, 0)] < tol))
        return i + 1, jnp.exp(logp - total[:, None]), trace, stop, bad, (weights, means, covs)

    def cond(state):
        return (state[0] < max_iter) & ~state[3]

    zero = (jnp.zeros(2), jnp.zeros((2, d)), jnp.zeros((2, d, d)))
    init = (0, resp, jnp.full(max_iter, jnp.nan), False, False, zero)
    n_iter, _, trace, _, bad, fitted = jax.lax.while_loop(cond, body, init)
    return n_iter, trace, bad, fitted


def _em(x, labels, tol, max_iter, reg):
    resp = np.stack([labels == 0, labels == 1], axis=1).astype(float)
    n_iter, trace, bad, (weights, means, covs) = _em_loop(
        jnp.asarray(x), jnp.asarray(resp), tol, reg, max_iter)
    if bool(bad):
        return None
    return Gmm2Fit(np.asarray(weights), np.asarray(means), np.asarray(covs),
                   np.asarray(trace[: int(n_iter)]))


def fit_gmm2(samples, rng: np.random.Generator, n_restarts: int = 10, tol: float = 1e-8,
             max_iter: int = 500, reg: float = 1e-9) -> Gmm2Fit:
    """Two-component Gaussian mixture by EM, best of ``n_restarts`` k-means inits.

    Iteration stops when the mean log-likelihood gains less than ``tol`` or
    after ``max_iter`` steps. Restarts whose covariance degenerates are dropped.
    When BIC prefers a single Gaussian, both components collapse onto it
    (equal weights, identical moments) so unimodal data yields a merged fit.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 100:
        raise DomainError("fit_gmm2 needs at least 100 samples")
    best = None
    for _ in range(n_restarts):
        fit = _em(x, _kmeans_init(x, rng), tol, max_iter, reg)
        if fit is None:
            continue
        if best is None or fit.loglik_trace[-1] > best.loglik_trace[-1]:
            best = fit
    if best is None:
        raise FitError("every EM restart produced a degenerate covariance")
    return _bic_merge(x, best, reg)


def _bic_merge(x, fit, reg):
    n, d = x.shape
    mean = x.mean(axis=0)
    cov = np.cov(x.T, bias=True).reshape(d, d) + reg * np.eye(d)
    single = Gmm2Fit(np.array([0.5, 0.5]), np.stack([mean, mean]), np.stack([cov, cov]),
                     np.zeros(0))
    ll1 = float(single.log_density(x).mean())
    extra = d + d * (d + 1) // 2 + 1  # parameters the second component adds
    if n * (fit.loglik_trace[-1] - ll1) < 0.5 * extra * np.log(n):
        single.loglik_trace = np.array([ll1])
        return single
    return fit


def reverse_kl(samples, log_q, log_p, return_se: bool = False):
    """``mean(log q(x) - log p(x))`` over samples ``x ~ q``.

    ``log_q`` and ``log_p`` are callables on a batch.
    """
    diff = np.asarray(log_q(samples), dtype=float) - np.asarray(log_p(samples), dtype=float)
    if not np.all(np.isfinite(diff)):
        raise DomainError("non-finite log-density in KL estimate")
    kl = float(diff.mean())
    if return_se:
        return kl, float(diff.std(ddof=1) / np.sqrt(diff.size))
    return kl


def gaussian_kl(mean_q, cov_q, mean_p, cov_p) -> float:
    """Closed-form ``KL(N(mean_q, cov_q) || N(mean_p, cov_p))``."""
    mean_q, mean_p = np.asarray(mean_q, float), np.asarray(mean_p, float)
    cov_q, cov_p = np.atleast_2d(cov_q), np.atleast_2d(cov_p)
    d = mean_q.size
    chol_p = np.linalg.cholesky(cov_p)
    inv_cq = np.linalg.solve(chol_p, cov_q)
    trace = np.trace(np.linalg.solve(chol_p.T, inv_cq))
    diff = np.linalg.solve(chol_p, mean_p - mean_q)
    logdet_p = 2.0 * np.sum(np.log(np.diag(chol_p)))
    logdet_q = np.linalg.slogdet(cov_q)[1]
    return float(0.5 * (trace + diff @ diff - d + logdet_p - logdet_q))


def _noise_cov(sigma_y, m):
    s = np.broadcast_to(np.asarray(sigma_y, dtype=float), (m,))
    if np.any(s <= 0):
        raise DomainError("sigma_y must be positive")
    return np.diag(s**2)


def _conjugate(mean, cov, A, y, noise):
    prec = np.linalg.inv(cov)
    post_prec = prec + A.T @ np.linalg.solve(noise, A)
    post_prec = 0.5 * (post_prec + post_prec.T)
    try:
        chol = np.linalg.cholesky(post_prec)
    except np.linalg.LinAlgError as exc:
        raise DomainError("posterior precision is singular") from exc
    post_cov = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(len(mean))))
    post_cov = 0.5 * (post_cov + post_cov.T)
    post_mean = post_cov @ (prec @ mean + A.T @ np.linalg.solve(noise, y))
    return post_mean, post_cov


def gaussian_posterior(prior: GaussianPrior, A, y, sigma_y) -> GaussianPrior:
    """Conjugate posterior for ``y = A x + n``, ``n ~ N(0, diag(sigma_y^2))``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if A.shape != (y.size, prior.dim):
        raise ShapeError(f"A has shape {A.shape}, expected ({y.size}, {prior.dim})")
    mean, cov = _conjugate(np.asarray(prior.mean), np.asarray(prior.cov), A, y,
                           _noise_cov(sigma_y, y.size))
    return GaussianPrior(mean, cov)


def gmm_posterior(prior: GmmPrior, A, y, sigma_y) -> GmmPrior:
    """Per-component conjugate update, reweighted by each component's evidence."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if A.shape != (y.size, prior.dim):
        raise ShapeError(f"A has shape {A.shape}, expected ({y.size}, {prior.dim})")
    noise = _noise_cov(sigma_y, y.size)
    log_w, means, covs = [], [], []
    for w, m, c in zip(np.asarray(prior.weights), np.asarray(prior.means), np.asarray(prior.covs)):
        pm, pc = _conjugate(m, c, A, y, noise)
        s = A @ c @ A.T + noise
        r = y - A @ m
        sign, logdet = np.linalg.slogdet(s)
        evidence = -0.5 * (y.size * LOG_2PI + logdet + r @ np.linalg.solve(s, r))
        log_w.append(np.log(w) + evidence)
        means.append(pm)
        covs.append(pc)
    return GmmPrior.from_log_weights(np.asarray(log_w), np.asarray(means), np.asarray(covs))


def psnr(truth, estimate, data_range: float = 1.0, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``cap`` for exact matches."""
    truth, estimate = np.asarray(truth, float), np.asarray(estimate, float)
    if truth.shape != estimate.shape:
        raise ShapeError("psnr inputs differ in shape")
    mse = np.mean((truth - estimate) ** 2)
    if mse == 0.0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range**2 / mse)))


def ssim(truth, estimate, data_range: float | None = None) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5)."""
    truth, estimate = np.asarray(truth, float), np.asarray(estimate, float)
    if truth.shape != estimate.shape or truth.ndim != 2:
        raise ShapeError("ssim needs two images of equal 2D shape")
    if data_range is None:
        data_range = float(truth.max() - truth.min()) or 1.0
    return float(structural_similarity(
        truth, estimate, data_range=data_range, gaussian_weights=True, sigma=1.5,
        use_sample_covariance=False,
    ))


def coverage_3sigma(truth, mean, std) -> float:
    """Fraction of pixels with ``|truth - mean| <= 3 std``."""
    truth, mean, std = (np.asarray(a, float) for a in (truth, mean, std))
    if not truth.shape == mean.shape == std.shape:
        raise ShapeError("coverage inputs differ in shape")
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise DomainError(f"{bad.size} pixels have non-positive std (first at {bad[0]})")
    return float(np.mean(np.abs(truth - mean) <= 3.0 * std))


METRIC_COLUMNS = ("run_id", "metric", "value", "n", "seed")


def write_metrics(path, rows) -> None:
    """Write ``(run_id, metric, value, n, seed)`` rows to CSV."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for run_id, metric, value, n, seed in rows:
            writer.writerow([run_id, metric, repr(float(value)), int(n), int(seed)])
