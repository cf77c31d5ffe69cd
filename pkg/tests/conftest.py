import numpy as np
import pytest

from fpkit.autodiff import configure_threads


def pytest_configure(config):
    configure_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_field(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
