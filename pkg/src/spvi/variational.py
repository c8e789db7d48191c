"""Variational families with reparameterized sampling and exact log-density.

Two families share one interface::

    family.init(key)                   -> params
    family.sample(params, key, n)      -> (x of shape (n, D), log q(x) of shape (n,))
    family.log_density(params, x)      -> log q(x)
    family.mean(params, key)           -> representative mean for convergence checks

Parameters are plain pytrees so they work with ``jax.grad`` and the optimizer.
"""

from __future__ import annotations

import dataclasses
import math

import jax
import jax.numpy as jnp
import numpy as np

from spvi.diffusion import LOG_2PI
from spvi.errors import DomainError, ShapeError


def _std_normal_logp(z):
    return -0.5 * (z.shape[-1] * LOG_2PI + jnp.sum(z**2, axis=-1))


@dataclasses.dataclass(frozen=True)
class DiagGaussian:
    """``N(mu, diag(|sigma_raw|^2))``; the absolute value keeps the scale positive."""

    dim: int
    init_mean: float = 0.5
    init_std: float = 0.1

    kind = "diag_gaussian"

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("dim must be >= 1")

    def init(self, key=None):
        del key
        return {
            "mu": jnp.full((self.dim,), self.init_mean),
            "sigma_raw": jnp.full((self.dim,), self.init_std),
        }

    def std(self, params):
        return jnp.abs(params["sigma_raw"])

    def sample(self, params, key, n: int):
        if n < 1:
            raise DomainError("need at least one sample")
        eps = jax.random.normal(key, (n, self.dim))
        sigma = self.std(params)
        x = params["mu"] + sigma * eps
        logq = _std_normal_logp(eps) - jnp.sum(jnp.log(sigma))
        return x, logq

    def log_density(self, params, x):
        x = jnp.asarray(x)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dimension {self.dim}")
        sigma = self.std(params)
        z = (x - params["mu"]) / sigma
        return _std_normal_logp(z) - jnp.sum(jnp.log(sigma))

    def mean(self, params, key=None):
        del key
        return params["mu"]


def default_width(dim: int, min_width: int = 32) -> int:
    """First hidden layer width: an eighth of the dimension, floored at ``min_width``."""
    return max(math.ceil(dim / 8), min_width)


@dataclasses.dataclass(frozen=True)
class RealNVP:
    """Affine-coupling flow with normalization layers.

    Each block is an affine coupling on alternating parity masks followed by
    an elementwise normalization. Coupling scales are ``scale_bound * tanh(.)``
    so every block is invertible for finite inputs. Normalization layers carry
    running ``mean``/``var`` statistics inside ``params``; they are held under
    ``stop_gradient`` in every transform and changed only by
    ``update_statistics``, so densities are exact for the current parameters.
    The output layer of every coupling net starts at zero, giving an identity
    flow at initialization.
    """

    dim: int
    n_layers: int = 32
    width: int | None = None
    scale_bound: float = 2.0
    norm_eps: float = 1e-4
    snapshot_samples: int = 1024

    kind = "realnvp"

    def __post_init__(self):
        if self.dim < 1 or self.n_layers < 1:
            raise DomainError("dim and n_layers must be >= 1")
        if self.width is None:
            object.__setattr__(self, "width", default_width(self.dim))

    def masks(self) -> np.ndarray:
        """``(n_layers, D)`` binary masks; 1 marks coordinates passed through."""
        parity = np.arange(self.dim) % 2
        return np.stack([(parity == (k % 2)).astype(float) for k in range(self.n_layers)])

    def init(self, key):
        keys = jax.random.split(key, self.n_layers)
        d, w = self.dim, self.width
        layers = []
        for k in keys:
            k1, k2 = jax.random.split(k)
            layers.append({
                "w1": jax.random.normal(k1, (d, w)) * np.sqrt(1.0 / d),
                "b1": jnp.zeros(w),
                "w2": jax.random.normal(k2, (w, w)) * np.sqrt(1.0 / w),
                "b2": jnp.zeros(w),
                "w3": jnp.zeros((w, 2 * d)),
                "b3": jnp.zeros(2 * d),
                "log_gamma": jnp.zeros(d),
                "beta": jnp.zeros(d),
                "mean": jnp.zeros(d),
                "var": jnp.ones(d),
            })
        return {"layers": layers}

    def _coupling(self, layer, masked):
        h = jax.nn.silu(masked @ layer["w1"] + layer["b1"])
        h = jax.nn.silu(h @ layer["w2"] + layer["b2"])
        out = h @ layer["w3"] + layer["b3"]
        s, t = out[..., : self.dim], out[..., self.dim:]
        return self.scale_bound * jnp.tanh(s / self.scale_bound), t

    def _norm_coeffs(self, layer):
        mean = jax.lax.stop_gradient(layer["mean"])
        var = jax.lax.stop_gradient(layer["var"])
        log_scale = layer["log_gamma"] - 0.5 * jnp.log(jnp.maximum(var, self.norm_eps))
        return mean, log_scale, layer["beta"]

    def forward(self, params, z, collect=False):
        """Base ``z`` -> sample ``x``; returns ``(x, log|det dx/dz|)``.

        With ``collect`` the inputs to every normalization layer are returned too.
        """
        masks = jnp.asarray(self.masks())
        h = z
        logdet = jnp.zeros(z.shape[:-1])
        seen = []
        for m, layer in zip(masks, params["layers"]):
            s, t = self._coupling(layer, h * m)
            s = s * (1.0 - m)
            h = h * m + (1.0 - m) * (h * jnp.exp(s) + t)
            logdet = logdet + jnp.sum(s, axis=-1)
            if collect:
                seen.append(h)
            mean, log_scale, beta = self._norm_coeffs(layer)
            h = (h - mean) * jnp.exp(log_scale) + beta
            logdet = logdet + jnp.sum(log_scale)
        if collect:
            return h, logdet, seen
        return h, logdet

    def inverse(self, params, x):
        """Sample ``x`` -> base ``z``; returns ``(z, log|det dz/dx|)``."""
        masks = jnp.asarray(self.masks())
        h = x
        logdet = jnp.zeros(x.shape[:-1])
        for m, layer in zip(masks[::-1], params["layers"][::-1]):
            mean, log_scale, beta = self._norm_coeffs(layer)
            h = (h - beta) * jnp.exp(-log_scale) + mean
            logdet = logdet - jnp.sum(log_scale)
            s, t = self._coupling(layer, h * m)
            s = s * (1.0 - m)
            h = h * m + (1.0 - m) * (h - t) * jnp.exp(-s)
            logdet = logdet - jnp.sum(s, axis=-1)
        return h, logdet

    def sample(self, params, key, n: int):
        if n < 1:
            raise DomainError("need at least one sample")
        z = jax.random.normal(key, (n, self.dim))
        x, logdet = self.forward(params, z)
        return x, _std_normal_logp(z) - logdet

    def log_density(self, params, x):
        x = jnp.asarray(x)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dimension {self.dim}")
        z, logdet = self.inverse(params, x)
        return _std_normal_logp(z) + logdet

    def mean(self, params, key):
        """Empirical mean over ``snapshot_samples`` draws with the given key."""
        x, _ = self.sample(params, key, self.snapshot_samples)
        return jnp.mean(x, axis=0)

    def update_statistics(self, params, key, n: int, momentum: float = 0.1):
        """Exponential moving update of every normalization layer's moments.

        Statistics are taken layer by layer from a fresh batch of ``n``
        base draws, matching batch normalization in the sampling direction.
        """
        z = jax.random.normal(key, (n, self.dim))
        _, _, seen = self.forward(params, z, collect=True)
        layers = []
        for layer, h in zip(params["layers"], seen):
            layer = dict(layer)
            layer["mean"] = (1 - momentum) * layer["mean"] + momentum * jnp.mean(h, axis=0)
            layer["var"] = (1 - momentum) * layer["var"] + momentum * jnp.var(h, axis=0)
            layers.append(layer)
        return {"layers": layers}


FAMILIES = {"diag_gaussian": DiagGaussian, "realnvp": RealNVP}


def init_family(kind: str, dim: int, key, n_layers: int = 32, width: int | None = None, **kwargs):
    """Construct a family and its initial parameters.

    ``width=None`` applies the default rule (``ceil(D/8)``, at least 32).
    """
    if dim < 1:
        raise DomainError("dim must be >= 1")
    if kind == "diag_gaussian":
        family = DiagGaussian(dim, **kwargs)
    elif kind == "realnvp":
        family = RealNVP(dim, n_layers=n_layers, width=width, **kwargs)
    else:
        raise DomainError(f"unknown family {kind!r}")
    return family, family.init(key)
