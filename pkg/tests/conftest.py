import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_qkv(rng, n, d):
    return (rng.standard_normal((n, d)) for _ in range(3))
