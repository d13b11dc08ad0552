import numpy as np
import pytest

from subshift.dist_core import biased_distribution, uniform_distribution


@pytest.fixture(scope="session")
def p_train():
    return biased_distribution(0.95, 0.8)


@pytest.fixture(scope="session")
def p_uniform():
    return uniform_distribution()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
