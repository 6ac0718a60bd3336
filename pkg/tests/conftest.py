import numpy as np
import pytest

from srb.core import Population


def linear_population(N, seed=0, p=1, strata=None, noise=1.0):
    """Small population with y roughly linear in positive features."""
    rng = np.random.default_rng(seed)
    x = rng.lognormal(0.0, 0.5, size=(N, p))
    y = 2.0 + x @ np.linspace(1.5, 0.5, p) + noise * rng.standard_normal(N)
    return Population(np.arange(1, N + 1), y, x, strata)


@pytest.fixture
def pop8():
    return linear_population(8, seed=3)


@pytest.fixture
def pop8_strat():
    return linear_population(8, seed=5, strata=np.array([0, 0, 0, 0, 1, 1, 1, 1]))


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
