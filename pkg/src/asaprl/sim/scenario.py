"""Scenario configuration and road construction for the four archetypes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .road import Road

KINDS = ("corridor", "highway", "intersection", "roundabout")
START_MARGIN = 10.0
TAIL = 40.0


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "corridor"
    lanes: int | None = 2  # None draws 2 or 3 lanes from the seed
    lane_width: float = 3.5
    route_length: float = 200.0
    density: float = 1.0  # vehicles per 100 m per lane
    traffic_speed: tuple[float, float] = (4.0, 7.0)
    ego_speed: tuple[float, float] = (6.0, 10.0)
    speed_limit: float = 15.0
    time_limit: int | None = None  # steps; None -> route / (0.4 * speed_limit)
    seed: int = 0
    obs_k: int = 4
    destination_reward: bool = True
    dt: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.lanes is not None and self.lanes < 1:
            raise ValueError("lane count must be >= 1")
        if self.density < 0:
            raise ValueError("density must be >= 0")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time limit must be positive")
        object.__setattr__(self, "traffic_speed", tuple(float(v) for v in self.traffic_speed))
        object.__setattr__(self, "ego_speed", tuple(float(v) for v in self.ego_speed))

    @property
    def max_steps(self) -> int:
        if self.time_limit is not None:
            return self.time_limit
        return int(math.ceil(self.route_length / (0.4 * self.speed_limit) / self.dt - 1e-9))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["traffic_speed"] = list(self.traffic_speed)
        d["ego_speed"] = list(self.ego_speed)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)


PRESETS: dict[str, dict] = {
    # 40 s for 200 m: the default rule (33.3 s) leaves no slack behind 4-7 m/s traffic
    "corridor": dict(time_limit=400),
    "highway": dict(kind="highway", lanes=None, route_length=400.0, density=1.2,
                    traffic_speed=(6.0, 12.0), ego_speed=(8.0, 14.0), speed_limit=20.0),
    "intersection": dict(kind="intersection", lanes=2, route_length=300.0, density=1.0,
                         traffic_speed=(5.0, 9.0), ego_speed=(6.0, 10.0), speed_limit=15.0),
    "roundabout": dict(kind="roundabout", lanes=None, route_length=300.0, density=1.0,
                       traffic_speed=(4.0, 8.0), ego_speed=(5.0, 9.0), speed_limit=12.0),
}


def preset(kind: str, **overrides) -> ScenarioConfig:
    if kind not in PRESETS:
        raise ValueError(f"unknown scenario {kind!r}; choose from {sorted(PRESETS)}")
    return ScenarioConfig(**{**PRESETS[kind], **overrides})


def toml_loads(text: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def load_scenario(path: str | Path, **overrides) -> ScenarioConfig:
    """Read a scenario from a JSON or TOML file (a ``kind`` key selects the preset)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        data = toml_loads(text)
    else:
        data = json.loads(text)
    data = dict(data.get("scenario", data))
    kind = data.pop("kind", "corridor")
    return preset(kind, **{**data, **overrides})


def build_road(cfg: ScenarioConfig, rng: np.random.Generator) -> Road:
    """Draw lane count and segment lengths for a scenario."""
    lanes = cfg.lanes if cfg.lanes is not None else int(rng.choice([2, 3]))
    route = cfg.route_length
    if cfg.kind in ("corridor", "highway"):
        pieces = [(START_MARGIN + route + TAIL, 0.0)]
    elif cfg.kind == "intersection":
        radius = 30.0
        arc = 0.5 * math.pi * radius
        first = rng.uniform(0.35, 0.65) * max(route - arc, 0.0)
        pieces = [(START_MARGIN + first, 0.0), (arc, 1.0 / radius),
                  (max(route - first - arc, 0.0) + TAIL, 0.0)]
    else:
        # entry bend, counter-clockwise ring section, exit bend
        bend_r, ring_r = 25.0, 40.0
        bend = math.pi / 6.0 * bend_r
        ring = rng.uniform(0.9, 1.3) * math.pi * ring_r
        rest = max(route - 2 * bend - ring, 0.0)
        first = rng.uniform(0.3, 0.7) * rest
        pieces = [(START_MARGIN + first, 0.0), (bend, -1.0 / bend_r), (ring, 1.0 / ring_r),
                  (bend, -1.0 / bend_r), (rest - first + TAIL, 0.0)]
    return Road(pieces, lanes, cfg.lane_width)
