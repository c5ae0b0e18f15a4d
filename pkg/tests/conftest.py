import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from idclf.gait import load_gait
from idclf.model import load_model, subsystem_model

settings.register_profile("idclf", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("idclf")


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def sub(model):
    return subsystem_model(model)


@pytest.fixture(scope="session")
def gait():
    return load_gait()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
