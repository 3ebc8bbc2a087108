import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_problem(rng, N, d, V, scale=1.0):
    H = rng.normal(size=(N, d)) * scale
    W = rng.normal(size=(V, d)) / np.sqrt(d)
    Y = rng.integers(0, V, size=N)
    return H, W, Y


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
