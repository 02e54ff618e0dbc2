import numpy as np
import pytest

from alstucker.linalg import qr_orthonormalize
from alstucker.tucker import TuckerTensor

# verdict lines collected by the acceptance module, echoed in the summary
ACCEPTANCE_LINES = []


def random_orthonormal(rng, m, r):
    return qr_orthonormalize(rng.standard_normal((m, r)))


def random_tucker(rng, shape, rank):
    rank = (rank,) * len(shape) if np.isscalar(rank) else tuple(rank)
    factors = tuple(random_orthonormal(rng, n, r) for n, r in zip(shape, rank))
    return TuckerTensor(rng.standard_normal(rank), factors)


class ArrayRhs:
    """Right-hand side given by a callable ``f(t, Y) -> ndarray | TuckerTensor``."""

    def __init__(self, f):
        self.f = f
        self.calls = 0

    def derivative_at(self, t, Y):
        self.calls += 1
        return self.f(t, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
