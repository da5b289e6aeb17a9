import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from delayid.signals import EXAMPLE1_INPUT, EXAMPLE2_INPUT, SystemSpec, sample_expression, simulate

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

EX1_TRUTH = {"a0": -0.35, "a1": -1.2, "b": 2.0}


def ex1_record(h=0.0, rate=500.0, horizon=90.0):
    dt = 1.0 / rate
    spec = SystemSpec((-0.35, -1.2), 2.0, input_delay=h, init=(20.0, 0.3))
    x = simulate(spec, EXAMPLE1_INPUT, horizon, dt)
    u = sample_expression(EXAMPLE1_INPUT, -10.0, dt, int(round((horizon + 10) / dt)) + 1)
    return u, x


@pytest.fixture(scope="session")
def ex1_500hz():
    """Noiseless constant-coefficient Example-1 record, no delay."""
    return ex1_record()


@pytest.fixture(scope="session")
def ex2_clean():
    dt = 0.002
    spec = SystemSpec((-0.35, -1.2), 2.0, input_delay=4.0, init=(20.0, 0.3))
    x = simulate(spec, EXAMPLE2_INPUT, 105, dt)
    u = sample_expression(EXAMPLE2_INPUT, -10.0, dt, int(round(115 / dt)) + 1)
    return u, x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
