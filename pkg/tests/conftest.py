import numpy as np
import pytest

from asaprl.skills import SkillBounds, VehicleState

CLEAN_TOL = np.array([0.05, 0.01, 0.05, 0.1])  # per-component recovery tolerance (m, rad, m/s, m/s^2)


def random_state(rng: np.random.Generator, bounds: SkillBounds = SkillBounds()) -> VehicleState:
    return VehicleState(
        float(rng.uniform(-50, 50)), float(rng.uniform(-50, 50)), float(rng.uniform(-np.pi, np.pi)),
        float(rng.uniform(0.0, bounds.v_max)), float(rng.uniform(bounds.a_min, bounds.a_max)),
    )


def random_theta(rng: np.random.Generator, bounds: SkillBounds = SkillBounds()) -> np.ndarray:
    return rng.uniform(bounds.lower, bounds.upper)


@pytest.fixture
def bounds() -> SkillBounds:
    return SkillBounds()
