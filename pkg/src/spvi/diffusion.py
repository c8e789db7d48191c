"""Variance-preserving diffusion process and importance-sampling time proposal.

The forward SDE is ``dx = -1/2 beta(t) x dt + sqrt(beta(t)) dw`` with a linear
noise schedule on the unit horizon. Its Gaussian transition kernel is
``N(alpha(t) x0, rho(t)^2 I)`` with ``alpha^2 + rho^2 = 1``.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import jax
import jax.numpy as jnp
import numpy as np

from spvi.errors import DomainError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


def _is_concrete(value) -> bool:
    return not isinstance(value, jax.core.Tracer)


@dataclasses.dataclass(frozen=True)
class VPSDE:
    """Linear-schedule VP SDE.

    Attributes:
        beta_min, beta_max: endpoints of the noise rate ``beta(t)``.
        dim: flattened state dimensionality.
        t_eps: smallest time used by estimators (``rho`` vanishes at 0).
        T: time horizon, fixed to 1.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    dim: int = 1
    t_eps: float = 1e-5
    T: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta_min < self.beta_max:
            raise DomainError(f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}")
        if not 0.0 < self.t_eps < self.T:
            raise DomainError(f"need 0 < t_eps < T, got t_eps={self.t_eps}")
        if self.T != 1.0:
            raise DomainError("the horizon T is fixed to 1.0")
        if int(self.dim) < 1:
            raise DomainError("dim must be a positive integer")

    def _check_time(self, t):
        if _is_concrete(t):
            arr = np.asarray(t)
            if np.any(arr < 0.0) or np.any(arr > self.T):
                raise DomainError(f"t must lie in [0, {self.T}]")

    def _check_state(self, x):
        if jnp.shape(x)[-1:] != (self.dim,):
            raise ShapeError(f"expected trailing dimension {self.dim}, got shape {jnp.shape(x)}")

    def beta(self, t):
        self._check_time(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def diffusion(self, t):
        """``g(t) = sqrt(beta(t))``."""
        return jnp.sqrt(self.beta(t))

    def integrated_beta(self, t):
        """``int_0^t beta(s) ds``."""
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2

    def drift(self, x, t):
        self._check_state(x)
        b = self.beta(t)
        return -0.5 * jnp.expand_dims(b, -1) * x

    def drift_divergence(self, t):
        """Divergence of the drift, ``-D beta(t) / 2`` (constant in x)."""
        return -0.5 * self.dim * self.beta(t)

    def kernel_params(self, t):
        """Mean scale ``alpha(t)`` and standard deviation ``rho(t)`` of the kernel."""
        self._check_time(t)
        log_alpha = -0.5 * self.integrated_beta(t)
        alpha = jnp.exp(log_alpha)
        # -expm1 keeps rho accurate for small t
        rho = jnp.sqrt(-jnp.expm1(2.0 * log_alpha))
        return alpha, rho

    def perturb(self, x, t, z):
        self._check_state(x)
        if jnp.shape(z) != jnp.shape(x) and jnp.shape(z)[-1:] != jnp.shape(x)[-1:]:
            raise ShapeError("noise and state dimensions differ")
        alpha, rho = self.kernel_params(t)
        alpha = jnp.expand_dims(alpha, -1)
        rho = jnp.expand_dims(rho, -1)
        return alpha * x + rho * z

    def prior_logp(self, x):
        """Log-density of the terminal distribution ``N(0, I)``."""
        return -0.5 * (x.shape[-1] * LOG_2PI + jnp.sum(x**2, axis=-1))

    def proposal(self) -> TimeProposal:
        return _cached_proposal(self)


DiffusionSpec = VPSDE


def _log_expm1(u, xp=jnp):
    # log(e^u - 1), stable at both ends
    big = u > 30.0
    safe = xp.where(big, 1.0, u)
    return xp.where(big, u + xp.log1p(-xp.exp(-xp.where(big, u, 1.0))), xp.log(xp.expm1(safe)))


@functools.lru_cache(maxsize=64)
def _cached_proposal(sde: VPSDE) -> TimeProposal:
    return TimeProposal.build(sde)


@dataclasses.dataclass(frozen=True)
class TimeProposal:
    """Time density ``p(t) = g(t)^2 / (rho(t)^2 Z)`` on ``[t_eps, T]``.

    With ``u(t) = int_0^t beta``, the unnormalized density is ``u'(t) / (1 - e^{-u})``
    whose antiderivative is ``log(e^u - 1)``, so the CDF and its inverse are in
    closed form. A tabulated ``(t, cdf)`` grid is kept for inspection.
    """

    sde: VPSDE
    Z: float
    grid_t: np.ndarray = dataclasses.field(repr=False, compare=False)
    grid_cdf: np.ndarray = dataclasses.field(repr=False, compare=False)

    def __hash__(self):
        return hash((self.sde, self.Z))

    @classmethod
    def build(cls, sde: VPSDE, n_grid: int = 10_000) -> TimeProposal:
        lo = float(_log_expm1(sde.integrated_beta(sde.t_eps), np))
        hi = float(_log_expm1(sde.integrated_beta(sde.T), np))
        Z = hi - lo
        if not np.isfinite(Z) or Z <= 0.0:
            raise DomainError("degenerate time proposal")
        grid_t = np.geomspace(sde.t_eps, sde.T, n_grid)
        cdf = (_log_expm1(sde.integrated_beta(grid_t), np) - lo) / Z
        cdf[0], cdf[-1] = 0.0, 1.0
        if np.any(np.diff(cdf) < 0):
            raise DomainError("time-proposal CDF is not monotone")
        return cls(sde=sde, Z=Z, grid_t=grid_t, grid_cdf=cdf)

    def density(self, t):
        _, rho = self.sde.kernel_params(t)
        return self.sde.beta(t) / (rho**2 * self.Z)

    def cdf(self, t):
        lo = _log_expm1(self.sde.integrated_beta(self.sde.t_eps))
        return (_log_expm1(self.sde.integrated_beta(t)) - lo) / self.Z

    def icdf(self, q):
        sde = self.sde
        lo = _log_expm1(sde.integrated_beta(sde.t_eps))
        u = jnp.logaddexp(0.0, lo + q * self.Z)
        slope = sde.beta_max - sde.beta_min
        # root of slope/2 t^2 + beta_min t - u = 0, cancellation-free form
        t = 2.0 * u / (sde.beta_min + jnp.sqrt(sde.beta_min**2 + 2.0 * slope * u))
        return jnp.clip(t, sde.t_eps, sde.T)

    def weight(self, t):
        """Importance factor ``Z rho(t)^2`` multiplying ``g^2 h`` at a drawn time."""
        _, rho = self.sde.kernel_params(t)
        return self.Z * rho**2

    def sample(self, key, shape=()):
        """Draw times and their importance weights."""
        q = jax.random.uniform(key, shape, dtype=jnp.float64)
        t = self.icdf(q)
        return t, self.weight(t)
