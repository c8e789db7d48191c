"""Adam with global-norm gradient clipping, over arbitrary parameter pytrees."""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp

from spvi.errors import StepError

tree_map = jax.tree_util.tree_map


class AdamState(NamedTuple):
    count: jax.Array
    mu: object
    nu: object


def adam_init(params) -> AdamState:
    zeros = tree_map(jnp.zeros_like, params)
    return AdamState(jnp.zeros((), jnp.int64), zeros, tree_map(jnp.zeros_like, params))


def global_norm(tree):
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.sqrt(sum(jnp.sum(jnp.abs(x) ** 2) for x in leaves))


def clip_by_global_norm(grad, bound):
    """Rescale ``grad`` so its global norm is at most ``bound``."""
    norm = global_norm(grad)
    scale = jnp.where(norm > bound, bound / jnp.where(norm > 0, norm, 1.0), 1.0)
    return tree_map(lambda g: g * scale, grad), norm


def adam_update(state: AdamState, params, grad, lr, clip=None, b1=0.9, b2=0.999, eps=1e-8):
    """One clipped Adam update. Pure and jit-compatible; returns ``(params, state)``."""
    if clip is not None:
        grad, _ = clip_by_global_norm(grad, clip)
    count = state.count + 1
    mu = tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.mu, grad)
    nu = tree_map(lambda v, g: b2 * v + (1 - b2) * g**2, state.nu, grad)
    c1 = 1 - b1**count
    c2 = 1 - b2**count
    params = tree_map(lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, mu, nu)
    return params, AdamState(count, mu, nu)


def step(state: AdamState, params, grad, lr, clip=None):
    """Eager optimizer step that refuses non-finite gradients."""
    if not bool(jnp.isfinite(global_norm(grad))):
        raise StepError("non-finite gradient")
    return adam_update(state, params, grad, lr, clip)
