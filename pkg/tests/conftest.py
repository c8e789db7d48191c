import itertools

import numpy as np
import pytest

import spvi  # noqa: F401  (float64 before any test builds arrays)
from spvi.forward.vlbi import UvCoverage


def full_coverage(n_stations: int, n_times: int, seed: int = 0, uv_scale: float = 4e9) -> UvCoverage:
    """Every station pair at every time stamp, random (u, v) in wavelengths."""
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(n_times):
        for i, j in itertools.combinations(range(n_stations), 2):
            u, v = rng.uniform(-uv_scale, uv_scale, size=2)
            rows.append((float(t), i, j, u, v, rng.uniform(0.5, 1.5)))
    return UvCoverage.from_records(rows, n_stations)


@pytest.fixture
def coverage():
    return full_coverage(4, 3)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
