import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_spd(rng, d=4):
    A = rng.normal(size=(d, d))
    return A @ A.T + d * np.eye(d) * 0.5


def random_skew(rng, d=4):
    A = rng.normal(size=(d, d))
    return A - A.T
