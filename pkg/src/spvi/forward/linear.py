"""Linear imaging operators: identity, low-frequency DFT and masked MRI k-space."""

from __future__ import annotations

import numpy as np
import jax.numpy as jnp

from spvi.errors import DomainError, ShapeError


def interleave(v):
    """Complex vector -> real vector ``[re0, im0, re1, im1, ...]``."""
    return jnp.stack([jnp.real(v), jnp.imag(v)], axis=-1).reshape(v.shape[:-1] + (-1,))


def deinterleave(r):
    r = jnp.asarray(r)
    pairs = r.reshape(r.shape[:-1] + (-1, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


def denoise_forward(x):
    return x


def signed_frequencies(shape):
    """Integer DFT frequencies of each coefficient, as (ky, kx) grids in fft layout."""
    h, w = shape
    ky = np.fft.fftfreq(h, d=1.0 / h)
    kx = np.fft.fftfreq(w, d=1.0 / w)
    return np.meshgrid(ky, kx, indexing="ij")


def lowfreq_indices(shape, fraction: float) -> np.ndarray:
    """Flat fft-layout indices of the ``round(fraction * D)`` lowest frequencies.

    Coefficients are ordered by radius ``sqrt(ky^2 + kx^2)``; ties keep raster order.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError("fraction must lie in (0, 1]")
    ky, kx = signed_frequencies(shape)
    radius = np.sqrt(ky**2 + kx**2).ravel()
    order = np.argsort(radius, kind="stable")
    m = max(1, int(round(fraction * radius.size)))
    return order[:m]


def lowfreq_forward(x, fraction: float):
    """Lowest-frequency 2D DFT coefficients of an image (unnormalized DFT)."""
    x = jnp.asarray(x)
    if x.ndim != 2:
        raise ShapeError("lowfreq_forward expects a 2D image")
    idx = lowfreq_indices(x.shape, fraction)
    return jnp.fft.fft2(x).ravel()[idx]


def mri_forward(x, mask):
    """Masked 2D Fourier coefficients ``(M ⊙ F x)`` at the sampled locations, raster order."""
    x = jnp.asarray(x)
    mask = np.asarray(mask)
    if x.ndim != 2 or mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match image shape {x.shape}")
    idx = np.flatnonzero(mask.ravel() != 0)
    return jnp.fft.fft2(x).ravel()[idx]


def zero_filled(values, mask):
    """Inverse DFT of measured k-space with unmeasured coefficients set to zero."""
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask.ravel() != 0)
    k = jnp.zeros(mask.size, dtype=jnp.complex128).at[idx].set(values)
    return jnp.real(jnp.fft.ifft2(k.reshape(mask.shape)))
