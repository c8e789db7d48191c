"""Measurements and their Gaussian log-likelihoods.

Every operator maps a flattened image to a real vector; complex outputs are
interleaved ``[re, im]`` pairs with independent noise per component. The
closure model concatenates closure phases (radians) and log closure
amplitudes, and wraps the phase residuals.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np

from spvi.errors import DomainError, ShapeError
from spvi.forward import linear, vlbi

MODEL_IDS = ("denoise", "lowfreq", "mri", "linear", "vlbi_vis", "vlbi_closure")


@dataclasses.dataclass(frozen=True, eq=False)
class Measurement:
    """Observed data ``y = f(x) + n`` with its operator description.

    ``metadata`` keys by model:

    - ``denoise``: ``shape`` (optional).
    - ``lowfreq``: ``shape``, ``fraction``.
    - ``mri``: ``shape``, ``mask``.
    - ``linear``: ``matrix`` (dense ``(M, D)``).
    - ``vlbi_vis``: ``shape``, ``fov_uas``, ``coverage``.
    - ``vlbi_closure``: as ``vlbi_vis`` plus ``design`` (a ``ClosureDesign``).
    """

    values: np.ndarray
    noise_sigma: np.ndarray
    model_id: str
    metadata: dict[str, Any] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.model_id not in MODEL_IDS:
            raise DomainError(f"unknown model_id {self.model_id!r}")
        values = np.asarray(self.values, dtype=float).ravel()
        sigma = np.broadcast_to(np.asarray(self.noise_sigma, dtype=float), values.shape).copy()
        if np.any(~(sigma > 0)):
            raise DomainError("noise_sigma must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise_sigma", sigma)
        arity = output_size(self.model_id, self.metadata)
        if arity is not None and arity != values.size:
            raise ShapeError(f"{self.model_id} produces {arity} values, got {values.size}")

    @property
    def dim(self):
        return self.values.size


def output_size(model_id: str, metadata: dict) -> int | None:
    if model_id == "denoise":
        shape = metadata.get("shape")
        return int(np.prod(shape)) if shape is not None else None
    if model_id == "lowfreq":
        return 2 * len(linear.lowfreq_indices(tuple(metadata["shape"]), metadata["fraction"]))
    if model_id == "mri":
        return 2 * int(np.count_nonzero(metadata["mask"]))
    if model_id == "linear":
        return int(np.shape(metadata["matrix"])[0])
    if model_id == "vlbi_vis":
        return 2 * len(metadata["coverage"])
    if model_id == "vlbi_closure":
        design = metadata["design"]
        return design.n_cp + design.n_ca
    return None


def input_size(model_id: str, metadata: dict) -> int | None:
    if model_id == "linear":
        return int(np.shape(metadata["matrix"])[1])
    shape = metadata.get("shape")
    return int(np.prod(shape)) if shape is not None else None


def make_forward(model_id: str, metadata: dict) -> Callable:
    """Real-valued forward map ``x (flat) -> f(x)`` for ``model_id``.

    Index sets and DFT matrices are precomputed so the returned function is
    cheap to trace under ``jit`` and ``vmap``.
    """
    if model_id == "denoise":
        return linear.denoise_forward
    if model_id == "linear":
        mat = jnp.asarray(metadata["matrix"])
        return lambda x: mat @ x
    shape = tuple(metadata["shape"])
    if model_id == "lowfreq":
        idx = linear.lowfreq_indices(shape, metadata["fraction"])
        return lambda x: linear.interleave(jnp.fft.fft2(x.reshape(shape)).ravel()[idx])
    if model_id == "mri":
        idx = np.flatnonzero(np.asarray(metadata["mask"]).ravel() != 0)
        return lambda x: linear.interleave(jnp.fft.fft2(x.reshape(shape)).ravel()[idx])
    cov = metadata["coverage"]
    mat = vlbi.dft_matrix(shape, metadata["fov_uas"], cov.u, cov.v)
    re, im = jnp.asarray(mat.real), jnp.asarray(mat.imag)
    if model_id == "vlbi_vis":
        return lambda x: linear.interleave(re @ x + 1j * (im @ x))
    if model_id == "vlbi_closure":
        design = metadata["design"]
        return lambda x: vlbi.closure_quantities(re @ x + 1j * (im @ x), design)
    raise DomainError(f"unknown model_id {model_id!r}")


def make_log_likelihood(y: Measurement) -> Callable:
    """Build ``x -> log p(y | x)`` (constant dropped) for repeated evaluation."""
    forward = make_forward(y.model_id, y.metadata)
    values = jnp.asarray(y.values)
    inv_sigma = jnp.asarray(1.0 / y.noise_sigma)
    d_in = input_size(y.model_id, y.metadata)
    n_cp = y.metadata["design"].n_cp if y.model_id == "vlbi_closure" else 0

    def log_lik(x):
        x = jnp.asarray(x)
        if x.ndim != 1 or (d_in is not None and x.shape[0] != d_in):
            raise ShapeError(f"expected a flat image of size {d_in}, got shape {x.shape}")
        resid = values - forward(x)
        if n_cp:
            resid = resid.at[:n_cp].set(jnp.arctan2(jnp.sin(resid[:n_cp]), jnp.cos(resid[:n_cp])))
        return -0.5 * jnp.sum((resid * inv_sigma) ** 2)

    return log_lik


def log_likelihood(y: Measurement, x):
    """``-1/2 sum(((y - f(x)) / sigma)^2)``."""
    return make_log_likelihood(y)(x)


def simulate(model_id: str, x, sigma, key, metadata: dict | None = None) -> Measurement:
    """Noisy measurement of ground truth ``x`` (flat) with Gaussian noise ``sigma``.

    For ``vlbi_closure`` the noise is added to the visibilities (per-baseline
    thermal ``coverage.sigma`` scaled by ``sigma``) and closure quantities are
    formed from the noisy data, with linearized closure standard deviations.
    """
    metadata = dict(metadata or {})
    x = jnp.asarray(x).ravel()
    if model_id == "vlbi_closure":
        cov = metadata["coverage"]
        shape = tuple(metadata["shape"])
        if "design" not in metadata:
            metadata["design"] = vlbi.closure_design(cov)
        design = metadata["design"]
        vis = np.asarray(vlbi.vlbi_visibilities(x.reshape(shape), metadata["fov_uas"], cov))
        th = sigma * np.asarray(cov.sigma)
        kr, ki = jax.random.split(key)
        # thermal sigma applies to the real and imaginary parts separately
        noisy = vis + th * (np.asarray(jax.random.normal(kr, vis.shape))
                            + 1j * np.asarray(jax.random.normal(ki, vis.shape)))
        values = np.asarray(vlbi.closure_quantities(jnp.asarray(noisy), design))
        cp_sig, ca_sig = vlbi.closure_sigmas(noisy, th, design)
        return Measurement(values, np.concatenate([cp_sig, ca_sig]), model_id, metadata)
    if model_id == "denoise" and "shape" not in metadata:
        metadata["shape"] = (x.size,)
    clean = np.asarray(make_forward(model_id, metadata)(x))
    noise = np.asarray(sigma) * np.asarray(jax.random.normal(key, clean.shape))
    return Measurement(clean + noise, np.broadcast_to(sigma, clean.shape), model_id, metadata)


def dense_matrix(y: Measurement) -> np.ndarray:
    """Jacobian of a linear forward model as a dense ``(M, D)`` array."""
    if y.model_id == "vlbi_closure":
        raise DomainError("the closure model is not linear")
    d = input_size(y.model_id, y.metadata)
    if d is None:
        d = y.dim
    forward = make_forward(y.model_id, y.metadata)
    return np.asarray(jax.jacfwd(forward)(jnp.zeros(d)))
