from .env import StepOutcome, TrafficEnv, WorldState, compute_reward, observation_dim, observation_scale
from .metrics import episode_metrics
from .road import Road
from .scenario import ScenarioConfig, load_scenario, preset
from .traffic import IDMParams, TrafficModel, TrafficVehicle

__all__ = [
    "IDMParams",
    "Road",
    "ScenarioConfig",
    "StepOutcome",
    "TrafficEnv",
    "TrafficModel",
    "TrafficVehicle",
    "WorldState",
    "compute_reward",
    "episode_metrics",
    "load_scenario",
    "observation_dim",
    "observation_scale",
    "preset",
]
