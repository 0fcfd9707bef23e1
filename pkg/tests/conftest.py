import numpy as np
import pytest

from admx.config import five_vsc


@pytest.fixture(scope="session")
def cfg():
    return five_vsc()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
