import numpy as np
import pytest

from spmsens.dsl import KernelNonlinearity, ModelTriple, NonlinearModel
from spmsens.linear import LinearProblem
from spmsens.measures import DiscreteMeasure
from spmsens.nonlinear import NonlinearProblem


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def transport_model():
    return ModelTriple("0", "1 + h", "0")


@pytest.fixture
def transport_problem(transport_model):
    return LinearProblem(transport_model, 0.0, DiscreteMeasure.dirac(0.0), 2.0)


def logistic_model():
    """a = 0, b = 1 + h/2, c = 1 - 0.5 mu(R+) + h."""
    return NonlinearModel(KernelNonlinearity.of("0"),
                          KernelNonlinearity.of("1", "0", "0.5"),
                          KernelNonlinearity.of("1 - 0.5 * y", "1", "1"))


@pytest.fixture
def logistic_problem():
    return NonlinearProblem(logistic_model(), 0.0,
                            DiscreteMeasure([0.5, 1.0, 1.5], [0.2, 0.3, 0.5]), 1.0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
