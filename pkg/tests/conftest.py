"""Shared fixtures: the default powertrain, short cycles and a throwaway registry."""

import numpy as np
import pytest

from app.core.config import configure_logging
from app.core.database import get_db_session_for_context_manager
from app.sim.cycles import DriveCycle, synth_cycle
from app.sim.maps import build_default_maps

configure_logging("WARNING")


@pytest.fixture(scope="session")
def model():
    return build_default_maps()


@pytest.fixture(scope="session")
def small_pack_model(model):
    """One parallel string: SOC moves by several percent per 10 s step."""
    return model.with_battery(cells_parallel=1)


@pytest.fixture
def short_cycle():
    return synth_cycle("trapezoid", 20, 2.0, seed=1)


@pytest.fixture
def toy_cycle():
    return synth_cycle("trapezoid", 60, 8.0, seed=1)


@pytest.fixture
def stationary_cycle():
    def make(samples: int = 600, dt: float = 10.0) -> DriveCycle:
        return DriveCycle(velocity=np.zeros(samples), dt=dt, name="stationary")
    return make


@pytest.fixture
def db(tmp_path):
    sessions = get_db_session_for_context_manager(f"sqlite:///{(tmp_path / 'registry.db').as_posix()}")
    session = next(sessions)
    yield session
    sessions.close()
