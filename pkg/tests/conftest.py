import numpy as np
import pytest

from core import build_event_sequence, constant_exposure, validate_exposure, validate_params
from run_metadata import reset_run_metadata


@pytest.fixture(autouse=True)
def fresh_run_metadata():
    reset_run_metadata()
    yield


@pytest.fixture
def two_state_params():
    return validate_params([[-0.5, 0.5], [1.0, -1.0]], [2.0, 8.0], [0.5, 0.5])


@pytest.fixture
def three_state_params():
    return validate_params([[-0.8, 0.5, 0.3], [0.6, -1.0, 0.4], [0.3, 0.5, -0.8]], [1.0, 3.0, 6.0],
                           [0.2, 0.3, 0.5])


@pytest.fixture
def step_exposure():
    """gamma = 1 on [0,3), 2 on [3,7), 0.5 on [7,10]; rho(10) = 12.5."""
    return validate_exposure([0.0, 3.0, 7.0], [1.0, 2.0, 0.5], 10.0)


@pytest.fixture
def claim_times():
    # 3.0 coincides with an exposure breakpoint
    return np.array([0.5, 1.2, 3.0, 4.4, 6.1, 8.8])


@pytest.fixture
def step_events(claim_times, step_exposure):
    return build_event_sequence(claim_times, step_exposure)


@pytest.fixture
def unit_exposure():
    return constant_exposure(10.0)
