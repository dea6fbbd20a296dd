import numpy as np
import pytest

from sncbf.diffnet import NetParams


def random_params(rng, p=8, n=2, scale=1.0):
    return NetParams(
        theta0=scale * rng.standard_normal((p, n)),
        b0=scale * rng.standard_normal(p),
        theta1=scale * rng.standard_normal(p),
        b1=float(scale * rng.standard_normal()),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
