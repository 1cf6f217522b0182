import numpy as np
import pytest

from gridcast.grid import Branch, Bus, GeneratorSpec, GridGraph, build_nrel118_like


def make_grid(n_bus, branches, slack=0, pv=(), loads=None, gens=()):
    loads = loads or {}
    buses = []
    for i in range(n_bus):
        kind = "slack" if i == slack else ("pv" if i in pv else "pq")
        p, q = loads.get(i, (0.0, 0.0))
        buses.append(Bus(i, 0, 138.0, kind, p, q))
    return GridGraph(buses, [Branch(*b) for b in branches], list(gens))


@pytest.fixture
def two_bus():
    return make_grid(2, [(0, 1, 0.01, 0.1, 100.0)])


@pytest.fixture
def three_bus():
    """Slack 0, pv 1, pq 2 on a meshed triangle."""
    gens = [GeneratorSpec(0, 0.0, 300.0, -100.0, 100.0, "thermal", True, 1.02),
            GeneratorSpec(1, 0.0, 100.0, -50.0, 50.0, "thermal", True, 1.01)]
    return make_grid(3, [(0, 1, 0.02, 0.06, 150.0), (0, 2, 0.08, 0.24, 100.0), (1, 2, 0.06, 0.18, 100.0)],
                     slack=0, pv=(1,), gens=gens)


@pytest.fixture
def path3():
    return make_grid(3, [(0, 1, 0.01, 0.1, 100.0), (1, 2, 0.01, 0.1, 100.0)])


@pytest.fixture(scope="session")
def nrel():
    return build_nrel118_like(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_grad(fn, arrays, h=1e-6):
    """Central finite-difference gradients of scalar fn(*arrays) w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = fn(*arrays)
            a[i] = old - h
            down = fn(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    """Norm-relative error between two gradient arrays."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# --- acceptance summary --------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
