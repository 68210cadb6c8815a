import numpy as np
import pytest

from anisodiff.schedule import build_scaled_linear
from anisodiff.volume import Volume


@pytest.fixture(scope="session")
def schedule():
    return build_scaled_linear(1000, 0.0005, 0.0195)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, d, h, w, lo=-1.0, hi=1.0):
    return Volume(rng.uniform(lo, hi, size=(d, h, w)).astype(np.float32))
