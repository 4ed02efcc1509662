import numpy as np
import pytest

from exprmap.dataset import SyntheticOracle, synth_pairs
from exprmap.flame import synth_model
from exprmap.rig import synth_cloud


@pytest.fixture(scope="session")
def small_model():
    return synth_model(3, V=300, K_e=50)


@pytest.fixture(scope="session")
def small_cloud(small_model):
    return synth_cloud(small_model.template, small_model.faces, 400, 3)


@pytest.fixture(scope="session")
def oracle():
    return SyntheticOracle.from_seed(5)


@pytest.fixture(scope="session")
def small_pairs(oracle):
    return synth_pairs(oracle, 10, 60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
