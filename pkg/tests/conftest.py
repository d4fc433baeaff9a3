import numpy as np
import pytest

from minnorm_cbf.cli import resolve_spec
from minnorm_cbf.model import load_model

ACCEPTANCE_LINES: list[str] = []


def load_builtin(name):
    return load_model(resolve_spec(f"builtin:{name}"))


@pytest.fixture
def ex1():
    return load_builtin("example1")


@pytest.fixture
def ex2():
    return load_builtin("example2")


@pytest.fixture
def single_integrator():
    return load_builtin("single_integrator")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(fn, x, step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


def second_diff(fn, x, i, j, step=1e-4):
    """Second-order central difference for d2 fn / dx_i dx_j."""
    x = np.asarray(x, dtype=float)
    ei = np.zeros_like(x)
    ej = np.zeros_like(x)
    ei[i] = step
    ej[j] = step
    if i == j:
        return (fn(x + ei) - 2 * fn(x) + fn(x - ei)) / step**2
    return (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (4 * step**2)


def rel_err(a, b):
    return abs(a - b) / max(1.0, abs(a))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
