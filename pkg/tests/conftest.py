import numpy as np
import pytest

from sharedsparse.grid import BoundarySpec, Grid2D, assemble


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dirichlet_op():
    def make(n, kind="laplace", kappa=0.0):
        return assemble(Grid2D(n), BoundarySpec.all_dirichlet(), kind, kappa)

    return make


def coarsen(field, n):
    """Average 2x2 blocks of a field on an ``n x n`` grid."""
    f = field.reshape(n, n)
    return 0.25 * (f[0::2, 0::2] + f[1::2, 0::2] + f[0::2, 1::2] + f[1::2, 1::2]).ravel()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
