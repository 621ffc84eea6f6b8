"""Shared fixtures for the resonet test suite."""

import numpy as np
import pytest

from app.services.fixtures import single_rotator_config, standard_config, standard_model
from app.services.hamiltonian import build_model


@pytest.fixture(scope="session")
def model():
    """Standard two-rotator model with Omega=(1,1) and a=(1,1,1)."""
    return standard_model()


@pytest.fixture(scope="session")
def single_mode_model():
    """Standard family with only the a1 cos(phi1) term switched on."""
    return standard_model(a=(1.0, 0.0, 0.0))


@pytest.fixture(scope="session")
def zero_model():
    """Standard family with every amplitude set to zero."""
    return standard_model(a=(0.0, 0.0, 0.0))


@pytest.fixture
def config():
    return standard_config()


@pytest.fixture
def rotator_model():
    return build_model(single_rotator_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
