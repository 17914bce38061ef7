import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rig8():
    from handlift.synthetic import generate_rig
    return generate_rig(8, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    from handlift.synthetic import generate_dataset
    return generate_dataset(3, 6, profile="detector-weak", seed=3, n_views=4)
