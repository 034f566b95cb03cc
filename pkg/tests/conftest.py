import numpy as np
import pytest

from flowattack.diffflow import EstimatorConfig, FlowEstimator
from flowattack.synthetic import make_pair


@pytest.fixture(scope="session")
def fast_estimator():
    """Small single-level solver used by most attack tests."""
    return FlowEstimator(EstimatorConfig(alpha=0.05, iterations=40,
                                         pyramid_levels=1, warp=False),
                         label="hs-fast")


@pytest.fixture(scope="session")
def pyramid_estimator():
    return FlowEstimator(EstimatorConfig(alpha=0.05, iterations=25,
                                         pyramid_levels=3, warp=True),
                         label="pyr-fast")


@pytest.fixture(scope="session")
def small_pair():
    """One 32x32 pair with known fractional motion."""
    return make_pair(5, 32, 32)


def random_flow(seed, height=8, width=8, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, scale, (2, height, width))
