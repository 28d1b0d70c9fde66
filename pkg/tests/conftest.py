import numpy as np
import pytest

from multibackmap.core import Atom, Topology
from multibackmap.synth import generate_synthetic_ensemble


@pytest.fixture(scope="session")
def small_ensemble():
    return generate_synthetic_ensemble(8, 24, seed=3, flexibility=10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def chain_topology(n, element="C"):
    atoms = tuple(Atom(element, "CA", i, "ALA") for i in range(n))
    return Topology(atoms, tuple((i, i + 1) for i in range(n - 1)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
