"""Poisson-disc k-space sampling masks."""

from __future__ import annotations

import numpy as np

from spvi.errors import CalibrationError, DomainError
from spvi.forward.linear import signed_frequencies


def _dart_throw(coords, order, dc, radius, limit=None):
    accepted = [dc]
    pts = np.empty((len(order), 2))
    pts[0] = coords[dc]
    r2 = radius * radius
    for idx in order:
        if limit is not None and len(accepted) >= limit:
            break
        if idx == dc:
            continue
        c = coords[idx]
        if np.min(np.sum((pts[: len(accepted)] - c) ** 2, axis=1)) >= r2:
            pts[len(accepted)] = c
            accepted.append(idx)
    return np.asarray(accepted)


def poisson_disc_mask(shape, accel: float, rng: np.random.Generator, tol: float = 0.1,
                      return_radius: bool = False):
    """Binary k-space mask (fft layout) with about ``1/accel`` of the entries set.

    Grid points are visited in random order and accepted when at least
    ``radius`` (signed-frequency units) from every accepted point. The radius
    is the largest squared-distance level whose saturated pattern still holds
    ``round(D / accel)`` points, found by bisection; the throw then stops at
    that count, so the minimum-distance property holds for the returned
    radius. The DC coefficient is always sampled.
    """
    if accel < 1.0:
        raise DomainError("acceleration must be >= 1")
    h, w = shape
    n = h * w
    if accel == 1.0:
        mask = np.ones(shape, dtype=np.uint8)
        return (mask, 0.0) if return_radius else mask
    target = n / accel
    want = int(round(target))
    if want < 1 or abs(want - target) > tol * target:
        raise CalibrationError(f"sampling fraction 1/{accel} is not reachable on a {shape} grid")

    ky, kx = signed_frequencies(shape)
    coords = np.stack([ky.ravel(), kx.ravel()], axis=1)
    dc = 0
    order = rng.permutation(n)
    # squared distances on an integer lattice are integers: bisect over them
    lo, hi = 0, int(h * h + w * w)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if len(_dart_throw(coords, order, dc, np.sqrt(mid))) >= want:
            lo = mid
        else:
            hi = mid
    radius = float(np.sqrt(lo))
    picked = _dart_throw(coords, order, dc, radius, limit=want)
    if abs(len(picked) - target) > tol * target:
        raise CalibrationError(f"could not reach sampling fraction 1/{accel} on a {shape} grid")
    mask = np.zeros(n, dtype=np.uint8)
    mask[picked] = 1
    mask = mask.reshape(shape)
    return (mask, radius) if return_radius else mask
