"""Score fields: analytic Gaussian / Gaussian-mixture scores and a dense score network.

Every score function is batched over leading axes of ``x``; ``t`` is a scalar
or broadcasts against ``x.shape[:-1]``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from spvi.diffusion import LOG_2PI, VPSDE
from spvi.errors import DomainError, ShapeError, TrainingError
from spvi.optim import adam_init, adam_update


@dataclasses.dataclass(frozen=True, eq=False)
class ScoreField:
    """A callable ``s(x, t)`` approximating the score of the diffused marginals."""

    fn: Callable
    kind: str
    dim: int

    def __call__(self, x, t):
        return self.fn(x, t)


def _texpand(t, x):
    return jnp.expand_dims(jnp.asarray(t, dtype=x.dtype), -1)


def _check_spd(cov):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError("covariance must be square")
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DomainError("covariance must be symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if evals.min() <= 0.0:
        raise DomainError("covariance must be positive definite")
    return evals, evecs


class GaussianPrior:
    """``N(mean, cov)``; its VP-diffused marginal is ``N(alpha m, alpha^2 C + rho^2 I)``."""

    def __init__(self, mean, cov):
        self.mean = jnp.asarray(mean, dtype=jnp.float64)
        self.cov = jnp.asarray(cov, dtype=jnp.float64)
        if self.cov.shape != (self.mean.shape[0],) * 2:
            raise ShapeError("mean and covariance sizes differ")
        evals, evecs = _check_spd(cov)
        self.evals = jnp.asarray(evals)
        self.evecs = jnp.asarray(evecs)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def _marginal_eigs(self, sde, t, x):
        alpha, rho = sde.kernel_params(t)
        alpha, rho = _texpand(alpha, x), _texpand(rho, x)
        return alpha, alpha**2 * self.evals + rho**2

    def marginal_log_prob(self, sde: VPSDE, x, t):
        alpha, lam = self._marginal_eigs(sde, t, x)
        proj = (x - alpha * self.mean) @ self.evecs
        return -0.5 * (jnp.sum(proj**2 / lam + jnp.log(lam), axis=-1) + self.dim * LOG_2PI)

    def log_prob(self, x):
        proj = (x - self.mean) @ self.evecs
        return -0.5 * (
            jnp.sum(proj**2 / self.evals, axis=-1) + jnp.sum(jnp.log(self.evals)) + self.dim * LOG_2PI
        )

    def score(self, sde: VPSDE, x, t):
        alpha, lam = self._marginal_eigs(sde, t, x)
        proj = (x - alpha * self.mean) @ self.evecs
        return -(proj / lam) @ self.evecs.T

    def sample(self, key, n: int):
        z = jax.random.normal(key, (n, self.dim))
        return self.mean + (z * jnp.sqrt(self.evals)) @ self.evecs.T

    def field(self, sde: VPSDE) -> ScoreField:
        return ScoreField(lambda x, t: self.score(sde, x, t), "gaussian-analytic", self.dim)


class GmmPrior:
    """Gaussian mixture prior; weights are normalized on construction."""

    def __init__(self, weights, means, covs):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1 or np.any(w < 0):
            raise DomainError("weights must be a nonempty nonnegative vector")
        if abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must sum to 1")
        means = np.asarray(means, dtype=np.float64)
        covs = np.asarray(covs, dtype=np.float64)
        if means.shape[0] != w.size or covs.shape != (w.size, means.shape[1], means.shape[1]):
            raise ShapeError("inconsistent mixture component shapes")
        eigs = [_check_spd(c) for c in covs]
        self.log_weights = jnp.log(jnp.asarray(w))
        self.means = jnp.asarray(means)
        self.covs = jnp.asarray(covs)
        self.evals = jnp.asarray(np.stack([e for e, _ in eigs]))
        self.evecs = jnp.asarray(np.stack([v for _, v in eigs]))

    @classmethod
    def from_log_weights(cls, log_weights, means, covs):
        lw = np.asarray(log_weights, dtype=np.float64)
        obj = cls(np.full(lw.size, 1.0 / lw.size), means, covs)
        obj.log_weights = jnp.asarray(lw - np.logaddexp.reduce(lw))
        return obj

    @property
    def weights(self):
        return jnp.exp(self.log_weights)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def _component_terms(self, sde, x, t):
        # per-component log-density and score, shapes (..., K) and (..., K, D)
        if t is None:
            alpha = jnp.ones(x.shape[:-1] + (1, 1))
            lam = self.evals
        else:
            alpha_t, rho_t = sde.kernel_params(t)
            alpha = jnp.asarray(alpha_t)[..., None, None] * jnp.ones(x.shape[:-1] + (1, 1))
            rho = jnp.asarray(rho_t)[..., None, None]
            lam = alpha**2 * self.evals + rho**2
        diff = x[..., None, :] - alpha * self.means
        proj = jnp.einsum("...kd,kde->...ke", diff, self.evecs)
        logp = -0.5 * (jnp.sum(proj**2 / lam + jnp.log(lam), -1) + self.dim * LOG_2PI)
        score = -jnp.einsum("...ke,kde->...kd", proj / lam, self.evecs)
        return logp, score

    def marginal_log_prob(self, sde: VPSDE, x, t):
        logp, _ = self._component_terms(sde, x, t)
        return logsumexp(logp + self.log_weights, axis=-1)

    def log_prob(self, x):
        logp, _ = self._component_terms(None, x, None)
        return logsumexp(logp + self.log_weights, axis=-1)

    def score(self, sde: VPSDE, x, t):
        logp, comp = self._component_terms(sde, x, t)
        logits = logp + self.log_weights
        resp = jnp.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        return jnp.sum(resp[..., None] * comp, axis=-2)

    def sample(self, key, n: int):
        k1, k2 = jax.random.split(key)
        comp = jax.random.categorical(k1, self.log_weights, shape=(n,))
        z = jax.random.normal(k2, (n, self.dim))
        scaled = z * jnp.sqrt(self.evals[comp])
        return self.means[comp] + jnp.einsum("nd,ned->ne", scaled, self.evecs[comp])

    def field(self, sde: VPSDE) -> ScoreField:
        return ScoreField(lambda x, t: self.score(sde, x, t), "gmm-analytic", self.dim)


def gaussian_score(prior: GaussianPrior, sde: VPSDE, x, t):
    return prior.score(sde, x, t)


def gmm_score(prior: GmmPrior, sde: VPSDE, x, t):
    return prior.score(sde, x, t)


# -- dense score network --------------------------------------------------------

_ACTIVATIONS = {
    "silu": jax.nn.silu,
    "tanh": jnp.tanh,
    "softplus": jax.nn.softplus,
    "gelu": jax.nn.gelu,
}


@dataclasses.dataclass(frozen=True)
class ScoreNet:
    """Dense time-conditioned score network.

    The network sees ``[x, emb(t)]`` with a fixed sinusoidal time embedding and
    predicts the added noise; the score is ``-output / rho(t)`` so that a zero
    output layer gives a zero score.
    """

    dim: int
    hidden: tuple[int, ...] = (256, 256)
    embed_dim: int = 32
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.embed_dim % 2 or self.embed_dim < 2:
            raise DomainError("embed_dim must be a positive even number")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise DomainError("hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        widths = [self.dim + self.embed_dim, *self.hidden, self.dim]
        return list(zip(widths[:-1], widths[1:]))

    def init(self, key) -> list[dict]:
        params = []
        sizes = self.layer_sizes
        keys = jax.random.split(key, len(sizes))
        for i, ((n_in, n_out), k) in enumerate(zip(sizes, keys)):
            if i == len(sizes) - 1:
                w = jnp.zeros((n_in, n_out))
            else:
                w = jax.random.normal(k, (n_in, n_out)) * math.sqrt(1.0 / n_in)
            params.append({"w": w, "b": jnp.zeros((n_out,))})
        return params

    def embed(self, t):
        half = self.embed_dim // 2
        freqs = jnp.exp(jnp.linspace(math.log(0.5), math.log(500.0), half))
        arg = 2.0 * math.pi * jnp.asarray(t)[..., None] * freqs
        return jnp.concatenate([jnp.sin(arg), jnp.cos(arg)], axis=-1)

    def apply(self, params, sde: VPSDE, x, t):
        if len(params) != len(self.layer_sizes) or x.shape[-1] != self.dim:
            raise ShapeError("parameters or input do not match the network shape")
        t = jnp.broadcast_to(jnp.asarray(t, dtype=x.dtype), x.shape[:-1])
        h = jnp.concatenate([x, self.embed(t)], axis=-1)
        act = _ACTIVATIONS[self.activation]
        for layer in params[:-1]:
            h = act(h @ layer["w"] + layer["b"])
        out = h @ params[-1]["w"] + params[-1]["b"]
        _, rho = sde.kernel_params(t)
        return -out / rho[..., None]

    def field(self, params, sde: VPSDE) -> ScoreField:
        return ScoreField(lambda x, t: self.apply(params, sde, x, t), "network", self.dim)


def net_score(params, net: ScoreNet, sde: VPSDE, x, t):
    return net.apply(params, sde, x, t)


@dataclasses.dataclass(frozen=True)
class DsmSchedule:
    lr: float = 1e-3
    steps: int = 5000
    batch_size: int = 256
    clip: float | None = 1.0


@dataclasses.dataclass
class TrainResult:
    params: list
    losses: np.ndarray


def dsm_loss(params, net: ScoreNet, sde: VPSDE, proposal, x0, key):
    """Likelihood-weighted denoising score matching, importance-sampled in time.

    With ``t ~ p(t)`` the weighted integrand ``Z rho^2 |s + z/rho|^2`` reduces to
    ``Z |rho s + z|^2``; the constant ``Z`` is dropped.
    """
    kt, kz = jax.random.split(key)
    t, _ = proposal.sample(kt, (x0.shape[0],))
    z = jax.random.normal(kz, x0.shape)
    xt = sde.perturb(x0, t, z)
    _, rho = sde.kernel_params(t)
    resid = rho[:, None] * net.apply(params, sde, xt, t) + z
    return jnp.mean(jnp.sum(resid**2, axis=-1))


def train_dsm(
    dataset,
    net: ScoreNet,
    sde: VPSDE,
    schedule: DsmSchedule,
    key,
    params=None,
) -> TrainResult:
    """Fit a score network to ``dataset`` (shape ``(n, D)``) by denoising score matching."""
    data = jnp.asarray(dataset, dtype=jnp.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ShapeError("dataset must be a nonempty (n, D) array")
    if data.shape[1] != net.dim or sde.dim != net.dim:
        raise ShapeError("dataset, network and SDE dimensions disagree")
    k_init, key = jax.random.split(key)
    if params is None:
        params = net.init(k_init)
    if schedule.steps == 0:
        return TrainResult(params, np.zeros(0))
    proposal = sde.proposal()
    batch = schedule.batch_size

    def update(carry, key):
        params, opt = carry
        kb, kl = jax.random.split(key)
        idx = jax.random.randint(kb, (batch,), 0, data.shape[0])
        loss, grad = jax.value_and_grad(dsm_loss)(params, net, sde, proposal, data[idx], kl)
        params, opt = adam_update(opt, params, grad, schedule.lr, schedule.clip)
        return (params, opt), loss

    run_chunk = jax.jit(lambda carry, keys: jax.lax.scan(update, carry, keys))

    carry = (params, adam_init(params))
    keys = jax.random.split(key, schedule.steps)
    losses = []
    for start in range(0, schedule.steps, _CHUNK):
        carry, chunk = run_chunk(carry, keys[start : start + _CHUNK])
        chunk = np.asarray(chunk)
        if not np.all(np.isfinite(chunk)):
            bad = start + int(np.argmin(np.isfinite(chunk)))
            raise TrainingError(f"non-finite DSM loss at step {bad}")
        losses.append(chunk)
    return TrainResult(carry[0], np.concatenate(losses))


_CHUNK = 250
