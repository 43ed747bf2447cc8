"""Deterministic 2D dense-traffic environment with skill- and control-level stepping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..skills import Trajectory, VehicleState, wrap_angle
from .road import Road
from .scenario import START_MARGIN, ScenarioConfig, build_road
from .traffic import VEHICLE_LENGTH, VEHICLE_WIDTH, IDMParams, TrafficModel, TrafficVehicle

PROGRESS_STEP = 10.0
R_PROGRESS = 1.0
R_DESTINATION = 1.0
R_CRASH = -5.0
R_OVERTAKE = 0.1

WHEELBASE = 2.7
MAX_STEER = 0.6  # rad
SENTINEL_X = 100.0
NEIGHBOR_RANGE = 60.0
HANDOFF_TOL = 0.5
MIN_SPAWN_SPACING = 12.0
TERMS = ("progress", "destination", "crash", "overtaking")


@dataclass
class WorldState:
    ego: VehicleState
    ego_s: float
    ego_d: float
    traffic: list[TrafficVehicle]
    step: int = 0
    progress: float = 0.0
    passed: frozenset = frozenset()
    collided: bool = False
    off_road: bool = False
    reached: bool = False


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    cause: str
    breakdown: dict[str, float]
    steps: int = 1


def compute_reward(prev: WorldState, nxt: WorldState, route_length: float,
                   destination_reward: bool = True) -> dict[str, float]:
    """Sparse reward terms for the transition ``prev -> nxt``."""
    crossed = math.floor(nxt.progress / PROGRESS_STEP + 1e-9) - math.floor(prev.progress / PROGRESS_STEP + 1e-9)
    crashed_now = (nxt.collided or nxt.off_road) and not (prev.collided or prev.off_road)
    arrived = nxt.reached and not prev.reached and not (nxt.collided or nxt.off_road)
    return {
        "progress": R_PROGRESS * crossed,
        "destination": R_DESTINATION if (arrived and destination_reward) else 0.0,
        "crash": R_CRASH if crashed_now else 0.0,
        "overtaking": R_OVERTAKE * len(nxt.passed - prev.passed),
    }


def total_reward(breakdown: dict[str, float]) -> float:
    return float(sum(breakdown[k] for k in TERMS))


def _rect_corners(x, y, h, length=VEHICLE_LENGTH, width=VEHICLE_WIDTH):
    c, s = math.cos(h), math.sin(h)
    hl, hw = 0.5 * length, 0.5 * width
    return [(x + c * dx - s * dy, y + s * dx + c * dy) for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))]


def rects_overlap(p1, p2) -> bool:
    """Separating-axis test for two oriented vehicle rectangles ``(x, y, heading)``."""
    c1, c2 = _rect_corners(*p1), _rect_corners(*p2)
    for h in (p1[2], p1[2] + math.pi / 2, p2[2], p2[2] + math.pi / 2):
        ax, ay = math.cos(h), math.sin(h)
        a = [ax * x + ay * y for x, y in c1]
        b = [ax * x + ay * y for x, y in c2]
        if max(a) < min(b) or max(b) < min(a):
            return False
    return True


def observation_dim(k: int) -> int:
    return 5 + 4 * k + 2


def observation_scale(cfg: ScenarioConfig) -> np.ndarray:
    """Fixed per-feature scales that bring observations to roughly unit range."""
    ego = [cfg.speed_limit, 3.0, 0.5 * cfg.lane_width, 0.5, 1.0]
    nb = [50.0, 5.0, 10.0, 0.5] * cfg.obs_k
    return np.array(ego + nb + [1.0, 1.0])


class TrafficEnv:
    """One episode at a time; not thread safe.

    Randomness comes only from the scenario seed (or the seed passed to
    :meth:`reset`), so a seed plus an action sequence determines everything.
    """

    def __init__(self, cfg: ScenarioConfig, idm: IDMParams = IDMParams(), keep_log: bool = True):
        self.cfg = cfg
        self.idm = idm
        self.keep_log = keep_log
        self.road: Road | None = None
        self.world: WorldState | None = None
        self.traffic: TrafficModel | None = None
        self.log: list[dict] = []
        self.done = True
        self.cause = "running"
        self.seed = cfg.seed
        self.episode_reward = 0.0

    # ------------------------------------------------------------------ setup
    @property
    def route_end(self) -> float:
        return START_MARGIN + self.cfg.route_length

    def reset(self, seed: int | None = None) -> np.ndarray:
        self.seed = self.cfg.seed if seed is None else int(seed)
        rng = np.random.default_rng(self.seed)
        cfg = self.cfg
        self.road = build_road(cfg, rng)
        road = self.road

        ego_lane = int(rng.integers(road.lanes))
        ego_s, ego_d = START_MARGIN, road.lane_center(ego_lane)
        x, y, h = road.pose(ego_s, ego_d)
        ego = VehicleState(x, y, h, float(rng.uniform(*cfg.ego_speed)), 0.0)

        vehicles = []
        per_lane = int(round(cfg.density * cfg.route_length / 100.0))
        lo, hi = ego_s + 20.0, self.route_end - 5.0
        vid = 0
        for lane in range(road.lanes):
            if per_lane == 0:
                continue
            slack = (hi - lo) - (per_lane - 1) * MIN_SPAWN_SPACING
            if slack < 0:
                raise ValueError(
                    f"density {cfg.density} leaves no room for {per_lane} vehicles per lane without overlap"
                )
            offsets = np.sort(rng.uniform(0.0, slack, per_lane))
            for i, off in enumerate(offsets):
                v_des = float(rng.uniform(*cfg.traffic_speed))
                vehicles.append(TrafficVehicle(vid, lane, float(lo + off + i * MIN_SPAWN_SPACING), v_des, v_des))
                vid += 1
        self.traffic = TrafficModel(vehicles, self.idm, exit_s=road.length + 20.0)
        self.world = WorldState(ego=ego, ego_s=ego_s, ego_d=ego_d, traffic=[v.copy() for v in vehicles])
        self.log = []
        self.done = False
        self.cause = "running"
        self.episode_reward = 0.0
        return self.observation()

    # ------------------------------------------------------------ observation
    def vehicle_pose(self, veh: TrafficVehicle) -> tuple[float, float, float]:
        return self.road.pose(veh.s, self.road.lane_center(veh.lane))

    def observation(self) -> np.ndarray:
        cfg, road, w = self.cfg, self.road, self.world
        ego = w.ego
        lane = road.nearest_lane(w.ego_d)
        route_h = road.heading(w.ego_s)
        feats = [
            ego.v,
            ego.a,
            w.ego_d - road.lane_center(lane),
            float(wrap_angle(ego.phi - route_h)),
            1.0 - w.progress / cfg.route_length,
        ]
        c, s = math.cos(ego.phi), math.sin(ego.phi)
        neigh = []
        for veh in w.traffic:
            vx, vy, vh = self.vehicle_pose(veh)
            dx, dy = vx - ego.x, vy - ego.y
            dist = math.hypot(dx, dy)
            if dist > NEIGHBOR_RANGE:
                continue
            neigh.append((dist, veh.vid, c * dx + s * dy, -s * dx + c * dy, veh.v - ego.v, float(wrap_angle(vh - ego.phi))))
        neigh.sort()
        for i in range(cfg.obs_k):
            if i < len(neigh):
                feats.extend(neigh[i][2:])
            else:
                feats.extend([SENTINEL_X, 0.0, 0.0, 0.0])
        feats.append(1.0 if lane < road.lanes - 1 else 0.0)
        feats.append(1.0 if lane > 0 else 0.0)
        return np.array(feats, dtype=float)

    # ------------------------------------------------------------------ steps
    def _ego_lanes(self, d: float) -> list[int]:
        reach = 0.5 * self.road.lane_width + 0.5 * VEHICLE_WIDTH - 0.2
        return [i for i in range(self.road.lanes) if abs(d - self.road.lane_center(i)) < reach]

    def _off_road(self, d: float, heading_err: float) -> bool:
        ext = abs(0.5 * VEHICLE_LENGTH * math.sin(heading_err)) + abs(0.5 * VEHICLE_WIDTH * math.cos(heading_err))
        return d - ext < 0.0 or d + ext > self.road.width

    def step_ego_state(self, ego_next: VehicleState, action=None) -> StepOutcome:
        """Advance the world by one ``dt`` with the ego placed at ``ego_next``.

        Both stepping modes go through here, so traffic evolution depends only
        on the sequence of ego states.
        """
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        prev = self.world
        obstacles = [(lane, prev.ego_s, prev.ego.v) for lane in self._ego_lanes(prev.ego_d)]
        before = {v.vid: v.s for v in self.traffic.vehicles}
        self.traffic.step(self.cfg.dt, obstacles)

        s_new, d_new = self.road.to_frenet(ego_next.x, ego_next.y)
        progress = max(prev.progress, min(max(s_new - START_MARGIN, 0.0), self.cfg.route_length))
        passed = set(prev.passed)
        for veh in self.traffic.vehicles:
            if veh.vid not in passed and prev.ego_s < before.get(veh.vid, math.inf) and s_new >= veh.s:
                passed.add(veh.vid)

        collided = prev.collided
        ego_pose = (ego_next.x, ego_next.y, ego_next.phi)
        for veh in self.traffic.vehicles:
            pose = self.vehicle_pose(veh)
            if math.hypot(pose[0] - ego_pose[0], pose[1] - ego_pose[1]) < 5.0 and rects_overlap(ego_pose, pose):
                collided = True
                break
        heading_err = float(wrap_angle(ego_next.phi - self.road.heading(s_new)))
        off_road = prev.off_road or self._off_road(d_new, heading_err) or s_new < 0.0

        nxt = WorldState(
            ego=ego_next, ego_s=s_new, ego_d=d_new,
            traffic=[v.copy() for v in self.traffic.vehicles],
            step=prev.step + 1, progress=progress, passed=frozenset(passed),
            collided=collided, off_road=off_road,
            reached=prev.reached or progress >= self.cfg.route_length - 1e-9,
        )
        breakdown = compute_reward(prev, nxt, self.cfg.route_length, self.cfg.destination_reward)
        reward = total_reward(breakdown)
        self.world = nxt

        if collided:
            cause = "crash"
        elif off_road:
            cause = "off-road"
        elif nxt.reached:
            cause = "success"
        elif nxt.step >= self.cfg.max_steps:
            cause = "timeout"
        else:
            cause = "running"
        self.done = cause != "running"
        self.cause = cause
        self.episode_reward += reward
        if self.keep_log:
            self.log.append({
                "step": nxt.step,
                "ego": [ego_next.x, ego_next.y, ego_next.phi, ego_next.v, ego_next.a],
                "action": None if action is None else [float(a) for a in action],
                "reward": reward,
                "breakdown": breakdown,
                "progress": progress,
                "completion": progress / self.cfg.route_length,
                "passed": len(passed),
                "cause": cause,
            })
        return StepOutcome(self.observation(), reward, self.done, cause, breakdown, 1)

    def bicycle_step(self, u) -> VehicleState:
        """Kinematic bicycle update for normalized ``(steer, pedal)``."""
        steer, pedal = (float(np.clip(c, -1.0, 1.0)) for c in u)
        ego, dt = self.world.ego, self.cfg.dt
        acc = pedal * (3.0 if pedal >= 0 else 6.0)
        v_new = max(0.0, ego.v + acc * dt)
        x = ego.x + ego.v * math.cos(ego.phi) * dt
        y = ego.y + ego.v * math.sin(ego.phi) * dt
        phi = float(wrap_angle(ego.phi + ego.v / WHEELBASE * math.tan(steer * MAX_STEER) * dt))
        return VehicleState(x, y, phi, v_new, (v_new - ego.v) / dt)

    def step_control(self, u) -> StepOutcome:
        u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
        return self.step_ego_state(self.bicycle_step(u), action=u)

    def step_skill(self, traj: Trajectory) -> StepOutcome:
        """Execute a skill's waypoints one per ``dt``; stops early when the episode ends."""
        ego = self.world.ego
        jump = math.hypot(traj.origin.x - ego.x, traj.origin.y - ego.y)
        if jump > HANDOFF_TOL:
            raise ValueError(f"skill starts {jump:.3f} m away from the ego vehicle")
        action = None if traj.theta is None else traj.theta.as_array()
        agg = dict.fromkeys(TERMS, 0.0)
        reward, n, out = 0.0, 0, None
        for row in traj.array:
            out = self.step_ego_state(VehicleState.from_array(row), action=action)
            n += 1
            reward += out.reward
            for k in TERMS:
                agg[k] += out.breakdown[k]
            if out.done:
                break
        return StepOutcome(out.observation, reward, out.done, out.cause, agg, n)

    # ---------------------------------------------------------------- logging
    def traffic_snapshot(self) -> list[tuple]:
        return [(v.vid, v.lane, v.s, v.v) for v in self.traffic.vehicles]

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")
