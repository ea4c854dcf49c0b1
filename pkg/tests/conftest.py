import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from gridshed.netmodel import GENERATOR, LOAD, Branch, Bus, PowerNetwork, ieee57  # noqa: E402


def make_network(p0, branches, pmin=None, pmax=None, weights=None):
    """Network from an injection list and (from, to, y, c) tuples."""
    p0 = np.asarray(p0, dtype=float)
    pmin = np.minimum(p0, 0) if pmin is None else pmin
    pmax = np.maximum(p0, 0) if pmax is None else pmax
    weights = np.ones(p0.size) if weights is None else weights
    buses = tuple(
        Bus(i + 1, GENERATOR if p > 0 else LOAD, float(p), float(lo), float(hi), float(w))
        for i, (p, lo, hi, w) in enumerate(zip(p0, pmin, pmax, weights))
    )
    brs = tuple(Branch(k + 1, a, b, float(y), float(c)) for k, (a, b, y, c) in enumerate(branches))
    return PowerNetwork(buses, brs)


@pytest.fixture
def two_bus():
    return make_network([1.0, -1.0], [(1, 2, 1.0, 2.0)])


@pytest.fixture
def triangle():
    return make_network([1.0, -1.0, 0.0], [(1, 2, 1.0, 1.0), (1, 3, 1.0, 1.0), (3, 2, 1.0, 1.0)])


@pytest.fixture(scope="session")
def net57():
    return ieee57()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        label = "shape       " if n == 0 else f"criterion {n:2d}"
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
