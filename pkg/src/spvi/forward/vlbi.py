"""Interferometric visibilities and their closure quantities.

Visibilities follow ``v(u, v) = sum_p x_p exp(-2 pi i (u l_p + v m_p))`` with
pixel angular offsets ``(l, m)`` in radians and ``(u, v)`` in wavelengths.
Closure phases and log closure amplitudes are formed per time stamp from a
non-redundant set of triangles and quadrangles.
"""

from __future__ import annotations

import dataclasses
import itertools
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from spvi.errors import DomainError, ShapeError

UAS_TO_RAD = np.pi / 180.0 / 3600.0 / 1e6


@dataclasses.dataclass(frozen=True)
class UvCoverage:
    """Baseline table: one row per measured station pair at a time stamp."""

    n_stations: int
    time: np.ndarray
    ant1: np.ndarray
    ant2: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        n = len(self.time)
        for name in ("ant1", "ant2", "u", "v", "sigma"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"coverage column {name} has the wrong length")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise DomainError("u, v must be finite")
        ants = np.concatenate([self.ant1, self.ant2])
        if n and (ants.min() < 0 or ants.max() >= self.n_stations):
            raise DomainError("baseline references an unknown station")
        if np.any(self.ant1 == self.ant2):
            raise DomainError("a baseline needs two distinct stations")
        if np.any(np.asarray(self.sigma) <= 0):
            raise DomainError("thermal noise must be positive")

    def __len__(self):
        return len(self.time)

    @classmethod
    def from_records(cls, records, n_stations: int | None = None) -> UvCoverage:
        """Build from ``(time, i, j, u, v, sigma)`` tuples."""
        arr = np.asarray(records, dtype=float).reshape(-1, 6)
        ant1 = arr[:, 1].astype(int)
        ant2 = arr[:, 2].astype(int)
        if n_stations is None:
            n_stations = int(max(ant1.max(initial=-1), ant2.max(initial=-1)) + 1)
        return cls(n_stations, arr[:, 0], ant1, ant2, arr[:, 3], arr[:, 4], arr[:, 5])


def read_coverage(path) -> UvCoverage:
    """Parse a whitespace-separated coverage file (``#`` starts a comment)."""
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DomainError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            records.append([float(p) for p in parts])
        except ValueError as exc:
            raise DomainError(f"{path}:{lineno}: {exc}") from None
    if not records:
        raise DomainError(f"{path}: empty coverage")
    return UvCoverage.from_records(records)


def write_coverage(path, cov: UvCoverage) -> None:
    lines = ["# time_stamp station_i station_j u v sigma_thermal"]
    for row in zip(cov.time, cov.ant1, cov.ant2, cov.u, cov.v, cov.sigma):
        t, i, j, u, v, sig = row
        lines.append(f"{float(t)!r} {int(i)} {int(j)} {float(u)!r} {float(v)!r} {float(sig)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def pixel_coordinates(shape, fov_uas: float):
    """Angular offsets ``(l, m)`` in radians of each pixel, raster order.

    Column index maps to ``l`` and row index to ``m``; pixel ``n // 2`` sits at 0.
    """
    if fov_uas <= 0:
        raise DomainError("field of view must be positive")
    h, w = shape
    psize = fov_uas * UAS_TO_RAD / w
    m, l = np.meshgrid((np.arange(h) - h // 2) * psize, (np.arange(w) - w // 2) * psize,
                       indexing="ij")
    return l.ravel(), m.ravel()


def dft_matrix(shape, fov_uas: float, u, v) -> np.ndarray:
    """Matrix mapping a flattened image to visibilities at ``(u, v)``."""
    l, m = pixel_coordinates(shape, fov_uas)
    phase = -2.0 * np.pi * (np.outer(u, l) + np.outer(v, m))
    return np.exp(1j * phase)


def vlbi_visibilities(x, fov_uas: float, coverage: UvCoverage):
    """Complex visibilities of a 2D image for every row of ``coverage``."""
    x = jnp.asarray(x)
    if x.ndim != 2:
        raise ShapeError("vlbi_visibilities expects a 2D image")
    if len(coverage) == 0:
        raise DomainError("empty coverage")
    mat = dft_matrix(x.shape, fov_uas, coverage.u, coverage.v)
    return jnp.asarray(mat) @ x.ravel().astype(mat.dtype)


def _wrap(phi):
    return jnp.arctan2(jnp.sin(phi), jnp.cos(phi))


def closure_phases(v, triangles, conj=None):
    """Closure phases ``arg(v_ij v_jk v_ki)`` wrapped to ``(-pi, pi]``.

    ``triangles`` holds rows of visibility indices; ``conj`` flags legs whose
    stored orientation is reversed (``v_ji = conj(v_ij)``).
    """
    v = jnp.asarray(v)
    triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= v.shape[-1]):
        raise DomainError("triangle references a missing baseline")
    legs = v[..., triangles]
    if conj is not None:
        legs = jnp.where(np.asarray(conj, dtype=bool), jnp.conj(legs), legs)
    phase = jnp.sum(jnp.angle(legs), axis=-1)
    wrapped = _wrap(phase)
    # arctan2 can land on -pi exactly; map it to +pi
    return jnp.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def log_closure_amplitudes(v, quads):
    """``log(|v_ij||v_kl| / (|v_ik||v_jl|))`` for index rows ``(ij, kl, ik, jl)``."""
    v = jnp.asarray(v)
    quads = np.asarray(quads, dtype=int).reshape(-1, 4)
    if quads.size and (quads.min() < 0 or quads.max() >= v.shape[-1]):
        raise DomainError("quadrangle references a missing baseline")
    amp = jnp.abs(v[..., quads])
    if not _is_traced(amp) and np.any(np.asarray(amp) == 0):
        raise DomainError("zero-magnitude visibility in a closure amplitude")
    logs = jnp.log(amp)
    return logs[..., 0] + logs[..., 1] - logs[..., 2] - logs[..., 3]


def _is_traced(a):
    return isinstance(a, jax.core.Tracer)


def select_nonredundant(stations):
    """Non-redundant closure triangles and quadrangles among ``stations``.

    Triangles are ``(ref, i, j)`` for the first station as reference, giving
    ``(N-1)(N-2)/2`` of them. Quadrangles ``(i, j, k, l)`` (closure amplitude
    ``|v_ij||v_kl| / |v_ik||v_jl|``) are picked greedily in lexicographic order,
    keeping a candidate only when it raises the rank of the design matrix in
    log-amplitude space, until ``N(N-3)/2`` are found.
    """
    stations = [int(s) for s in stations]
    n = len(stations)
    if n < 3:
        raise DomainError("closure quantities need at least 3 stations")
    ref = stations[0]
    triangles = [(ref, a, b) for a, b in itertools.combinations(stations[1:], 2)]

    quads = []
    n_quads = n * (n - 3) // 2
    if n >= 4:
        pair_index = {p: i for i, p in enumerate(itertools.combinations(sorted(stations), 2))}

        def row(q):
            i, j, k, l = q
            r = np.zeros(len(pair_index))
            for a, b, sgn in ((i, j, 1), (k, l, 1), (i, k, -1), (j, l, -1)):
                r[pair_index[tuple(sorted((a, b)))]] += sgn
            return r

        design = np.zeros((0, len(pair_index)))
        for combo in itertools.combinations(stations, 4):
            a, b, c, d = combo
            for q in ((a, b, c, d), (a, c, b, d), (a, d, b, c)):
                cand = np.vstack([design, row(q)])
                if np.linalg.matrix_rank(cand) > design.shape[0]:
                    design = cand
                    quads.append(q)
                if len(quads) == n_quads:
                    break
            if len(quads) == n_quads:
                break
    return triangles, quads


@dataclasses.dataclass(frozen=True)
class ClosureDesign:
    """Visibility-index tables for every closure quantity in a coverage."""

    tri_index: np.ndarray    # (n_cp, 3)
    tri_conj: np.ndarray     # (n_cp, 3) bool
    quad_index: np.ndarray   # (n_ca, 4)

    @property
    def n_cp(self):
        return len(self.tri_index)

    @property
    def n_ca(self):
        return len(self.quad_index)


def closure_design(coverage: UvCoverage) -> ClosureDesign:
    """Assemble non-redundant closure sets per time stamp of ``coverage``."""
    tri_idx, tri_conj, quad_idx = [], [], []
    for t in np.unique(coverage.time):
        rows = np.flatnonzero(coverage.time == t)
        lookup = {}
        for r in rows:
            i, j = int(coverage.ant1[r]), int(coverage.ant2[r])
            lookup[(i, j)] = (r, False)
            lookup[(j, i)] = (r, True)
        present = sorted({int(a) for a in coverage.ant1[rows]} | {int(a) for a in coverage.ant2[rows]})
        if len(present) < 3:
            continue
        # keep only stations that share baselines with all others at this time
        complete = all((a, b) in lookup for a, b in itertools.combinations(present, 2))
        if not complete:
            raise DomainError(f"time stamp {t}: closure sets need every station pair measured")
        tris, quads = select_nonredundant(present)
        for i, j, k in tris:
            legs = [lookup[(i, j)], lookup[(j, k)], lookup[(k, i)]]
            tri_idx.append([r for r, _ in legs])
            tri_conj.append([c for _, c in legs])
        for i, j, k, l in quads:
            quad_idx.append([lookup[(i, j)][0], lookup[(k, l)][0], lookup[(i, k)][0], lookup[(j, l)][0]])
    return ClosureDesign(
        np.asarray(tri_idx, dtype=int).reshape(-1, 3),
        np.asarray(tri_conj, dtype=bool).reshape(-1, 3),
        np.asarray(quad_idx, dtype=int).reshape(-1, 4),
    )


def closure_sigmas(v, sigma, design: ClosureDesign):
    """First-order standard deviations of closure phases and log closure amplitudes.

    Both are ``sqrt(sum_b (sigma_b / |v_b|)^2)`` over the contributing baselines.
    """
    rel2 = (np.asarray(sigma) / np.abs(np.asarray(v))) ** 2
    cp = np.sqrt(rel2[design.tri_index].sum(axis=1))
    ca = np.sqrt(rel2[design.quad_index].sum(axis=1))
    return cp, ca


def closure_quantities(v, design: ClosureDesign):
    """Concatenated ``[closure phases, log closure amplitudes]``."""
    return jnp.concatenate([
        closure_phases(v, design.tri_index, design.tri_conj),
        log_closure_amplitudes(v, design.quad_index),
    ], axis=-1)


def flux_penalty(x, target: float, weight: float = 1.0):
    """``weight * (sum(x) - target)^2``."""
    return weight * (jnp.sum(jnp.asarray(x)) - target) ** 2
