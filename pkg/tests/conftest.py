import numpy as np
import pytest

from tficon.toy import init_toy, toy_image


@pytest.fixture(scope="session")
def backbone():
    return init_toy(0)


@pytest.fixture(scope="session")
def images():
    return [toy_image(seed) for seed in range(16)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
