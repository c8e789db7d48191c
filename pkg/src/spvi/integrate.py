"""Adaptive Dormand-Prince 5(4) integration with adjoint-method gradients.

Only the endpoint of the trajectory is returned. If the step budget runs out
before reaching ``t1`` the result is NaN, so failures surface both in traced
code (through the caller's finiteness checks) and eagerly (``SolverError``).
"""

from __future__ import annotations

import functools

import jax
import jax.numpy as jnp
from jax import lax
from jax.flatten_util import ravel_pytree

from spvi.errors import SolverError

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


def _rk_step(func, y, f0, t, h):
    ks = [f0]
    for i in range(1, 7):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(func(yi, t + _C[i] * h))
    y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    return y_new, ks[-1], err


def _error_ratio(err, y0, y1, rtol, atol):
    scale = atol + rtol * jnp.maximum(jnp.abs(y0), jnp.abs(y1))
    return jnp.sqrt(jnp.mean((err / scale) ** 2))


def _initial_step(func, y0, f0, t0, span, rtol, atol):
    scale = atol + rtol * jnp.abs(y0)
    d0 = jnp.sqrt(jnp.mean((y0 / scale) ** 2))
    d1 = jnp.sqrt(jnp.mean((f0 / scale) ** 2))
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / d1)
    # the trial evaluation must stay inside the interval (the field may be undefined outside)
    h0 = jnp.minimum(h0, jnp.abs(span))
    y1 = y0 + jnp.sign(span) * h0 * f0
    f1 = func(y1, t0 + jnp.sign(span) * h0)
    d2 = jnp.sqrt(jnp.mean(((f1 - f0) / scale) ** 2)) / h0
    h1 = jnp.where(
        jnp.maximum(d1, d2) <= 1e-15,
        jnp.maximum(1e-6, h0 * 1e-3),
        (0.01 / jnp.maximum(d1, d2)) ** 0.2,
    )
    return jnp.minimum(jnp.minimum(100.0 * h0, h1), jnp.abs(span))


def _dopri5(func, y0, t0, t1, rtol, atol, max_steps):
    """Integrate a flat state from t0 to t1. Returns (y1, attempted steps, reached)."""
    span = t1 - t0
    direction = jnp.sign(span)
    f0 = func(y0, t0)
    h_init = _initial_step(func, y0, f0, t0, span, rtol, atol)

    def cond(state):
        _, _, t, _, n = state
        return (direction * (t1 - t) > 1e-12 * jnp.abs(span)) & (n < max_steps)

    def body(state):
        y, f, t, h_abs, n = state
        h_abs = jnp.minimum(h_abs, jnp.abs(t1 - t))
        y_new, f_new, err = _rk_step(func, y, f, t, direction * h_abs)
        ratio = _error_ratio(err, y, y_new, rtol, atol)
        accept = ratio <= 1.0
        factor = jnp.clip(0.9 * jnp.where(ratio > 0, ratio, 1e-10) ** -0.2, 0.2, 10.0)
        y = jnp.where(accept, y_new, y)
        f = jnp.where(accept, f_new, f)
        t = jnp.where(accept, t + direction * h_abs, t)
        return y, f, t, h_abs * factor, n + 1

    y, _, t, _, n = lax.while_loop(cond, body, (y0, f0, jnp.asarray(t0, y0.dtype), h_init, 0))
    reached = direction * (t1 - t) <= 1e-12 * jnp.abs(span)
    return y, n, reached


def solve_info(func, y0, t0, t1, *args, rtol=1e-5, atol=1e-5, max_steps=10_000):
    """Forward solve only; returns ``(y1, n_steps, reached)`` for diagnostics."""
    return _dopri5(lambda y, t: func(y, t, *args), y0, t0, t1, rtol, atol, max_steps)


@functools.partial(jax.custom_vjp, nondiff_argnums=(0, 2, 3, 4, 5, 6))
def _solve(func, y0, t0, t1, rtol, atol, max_steps, args):
    y1, _, reached = _dopri5(lambda y, t: func(y, t, *args), y0, t0, t1, rtol, atol, max_steps)
    return jnp.where(reached, y1, jnp.nan)


def _solve_fwd(func, y0, t0, t1, rtol, atol, max_steps, args):
    y1 = _solve(func, y0, t0, t1, rtol, atol, max_steps, args)
    return y1, (y1, args)


def _solve_bwd(func, t0, t1, rtol, atol, max_steps, res, g):
    y1, args = res
    args_bar0 = jax.tree_util.tree_map(jnp.zeros_like, args)
    flat0, unravel = ravel_pytree((y1, g, args_bar0))

    def augmented(flat, t):
        y, a, _ = unravel(flat)
        dy, vjp = jax.vjp(lambda yy, aa: func(yy, t, *aa), y, args)
        a_dot, args_dot = vjp(a)
        return ravel_pytree((dy, -a_dot, jax.tree_util.tree_map(jnp.negative, args_dot)))[0]

    flat, _, reached = _dopri5(augmented, flat0, t1, t0, rtol, atol, max_steps)
    flat = jnp.where(reached, flat, jnp.nan)
    _, y_bar, args_bar = unravel(flat)
    return y_bar, args_bar


_solve.defvjp(_solve_fwd, _solve_bwd)


def solve(func, y0, t0: float, t1: float, *args, rtol=1e-5, atol=1e-5, max_steps=10_000):
    """Integrate ``dy/dt = func(y, t, *args)`` from ``t0`` to ``t1``.

    ``y0`` must be a flat float array. Differentiable in ``y0``, ``args`` and
    any traced values ``func`` closes over (hoisted by closure conversion).
    """
    converted, consts = jax.closure_convert(lambda y, t, *a: func(y, t, *a), y0, t0, *args)
    y1 = _solve(converted, y0, float(t0), float(t1), rtol, atol, int(max_steps), (*args, *consts))
    if not isinstance(y1, jax.core.Tracer) and not bool(jnp.all(jnp.isfinite(y1))):
        raise SolverError(f"no convergence within {max_steps} steps")
    return y1
