"""Scripted driving expert and the demonstration file formats.

The expert is privileged: it reads lane-level traffic state straight from
the environment.  Longitudinal control is IDM toward a desired speed,
lateral control is pure pursuit on the target lane center, and a lane
change is triggered when the time headway to the current leader drops
below a threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .recovery import SkillRecord
from .sim.env import MAX_STEER, WHEELBASE, TrafficEnv
from .sim.metrics import episode_metrics
from .sim.scenario import ScenarioConfig
from .sim.traffic import VEHICLE_LENGTH, IDMParams, idm_accel
from .skills import STATE_FIELDS, SkillParams, VehicleState

FORMAT_VERSION = 1
STEP_FIELDS = ("t", "x", "y", "phi", "v", "a", "steer", "pedal")


class DemoFormatError(ValueError):
    """Raised for malformed or inconsistent demonstration files."""


class ExpertQualityError(RuntimeError):
    """Raised when the scripted expert fails too often to supply priors."""


@dataclass(frozen=True)
class ExpertPolicyConfig:
    desired_speed: float = 10.0
    trigger_headway: float = 2.5  # s; lane change considered below this
    cooldown: int = 30  # steps between lane changes
    idm: IDMParams = IDMParams(s0=3.0, headway=1.2, a_max=2.0, b=3.0)
    lookahead_time: float = 0.8  # s
    min_lookahead: float = 6.0  # m
    safe_rear_gap: float = 6.0  # m, bumper to bumper
    safe_front_gap: float = 8.0  # m

    def __post_init__(self):
        for name in ("desired_speed", "trigger_headway", "lookahead_time", "min_lookahead"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cooldown < 0:
            raise ValueError("cooldown must be non-negative")


@dataclass
class ControlDemonstration:
    """One expert episode: states[0] is the reset state, controls[i] drives states[i] -> states[i+1]."""

    scenario: ScenarioConfig
    seed: int
    states: np.ndarray  # (N + 1, 5)
    controls: np.ndarray  # (N, 2) normalized (steer, pedal)
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)


class ScriptedExpert:
    def __init__(self, cfg: ExpertPolicyConfig = ExpertPolicyConfig()):
        self.cfg = cfg
        self.target_lane: int | None = None
        self.since_change = 0

    def reset(self, env: TrafficEnv) -> None:
        self.target_lane = env.road.nearest_lane(env.world.ego_d)
        self.since_change = self.cfg.cooldown

    def _gaps(self, env: TrafficEnv, lane: int):
        """(front gap, front speed, rear gap, rear speed) in ``lane`` around the ego."""
        s_ego = env.world.ego_s
        front, rear = (math.inf, 0.0), (math.inf, 0.0)
        for veh in env.traffic.vehicles:
            if veh.lane != lane:
                continue
            ds = veh.s - s_ego
            if ds >= 0:
                if ds - VEHICLE_LENGTH < front[0]:
                    front = (ds - VEHICLE_LENGTH, veh.v)
            elif -ds - VEHICLE_LENGTH < rear[0]:
                rear = (-ds - VEHICLE_LENGTH, veh.v)
        return front[0], front[1], rear[0], rear[1]

    def _choose_lane(self, env: TrafficEnv) -> None:
        cfg, road, ego = self.cfg, env.road, env.world.ego
        cur = self.target_lane
        gap, _, _, _ = self._gaps(env, cur)
        headway = gap / max(ego.v, 1.0)
        if headway >= cfg.trigger_headway or self.since_change < cfg.cooldown:
            return
        if abs(env.world.ego_d - road.lane_center(cur)) > 0.5:
            return  # finish the current manoeuvre first
        best, best_gap = cur, gap
        for lane in (cur - 1, cur + 1):
            if not 0 <= lane < road.lanes:
                continue
            f_gap, _, r_gap, r_v = self._gaps(env, lane)
            rear_need = cfg.safe_rear_gap + max(0.0, r_v - ego.v) * 2.0
            if f_gap > max(best_gap, cfg.safe_front_gap) + 5.0 and r_gap > rear_need:
                best, best_gap = lane, f_gap
        if best != cur:
            self.target_lane = best
            self.since_change = 0

    def act(self, env: TrafficEnv) -> np.ndarray:
        cfg, road, w = self.cfg, env.road, env.world
        ego = w.ego
        self.since_change += 1
        self._choose_lane(env)

        # longitudinal: follow the closest leader among occupied and target lanes
        lanes = {self.target_lane, road.nearest_lane(w.ego_d)}
        gap, v_lead = None, 0.0
        for lane in lanes:
            g, v, _, _ = self._gaps(env, lane)
            if math.isfinite(g) and (gap is None or g < gap):
                gap, v_lead = g, v
        dv = ego.v - v_lead if gap is not None else 0.0
        acc = idm_accel(ego.v, cfg.desired_speed, gap, dv, cfg.idm)
        pedal = acc / 3.0 if acc >= 0 else acc / 6.0

        # lateral: pure pursuit on the target lane center
        look = max(cfg.min_lookahead, cfg.lookahead_time * ego.v)
        tx, ty, _ = road.pose(w.ego_s + look, road.lane_center(self.target_lane))
        dx, dy = tx - ego.x, ty - ego.y
        c, s = math.cos(ego.phi), math.sin(ego.phi)
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        ld2 = max(lx * lx + ly * ly, 1e-6)
        delta = math.atan(2.0 * WHEELBASE * ly / ld2)
        steer = delta / MAX_STEER
        return np.clip(np.array([steer, pedal]), -1.0, 1.0)


def run_episode(env: TrafficEnv, expert: ScriptedExpert, seed: int) -> tuple[ControlDemonstration, dict]:
    env.reset(seed)
    expert.reset(env)
    states = [env.world.ego.as_array()]
    controls = []
    while not env.done:
        u = expert.act(env)
        env.step_control(u)
        controls.append(u)
        states.append(env.world.ego.as_array())
    metrics = episode_metrics(env.log)
    demo = ControlDemonstration(env.cfg, seed, np.array(states), np.array(controls).reshape(-1, 2),
                                info={"cause": env.cause, **metrics})
    return demo, metrics


def episode_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), 0x5EED])
    return [int(x) for x in ss.generate_state(n, dtype=np.uint32)] if n else []


def run_expert(env_cfg: ScenarioConfig, expert_cfg: ExpertPolicyConfig = ExpertPolicyConfig(),
               n_episodes: int = 10, seed: int = 0, min_success: float = 0.5,
               keep_failures: bool = False) -> tuple[list[ControlDemonstration], dict]:
    """Roll out the scripted expert and keep the successful episodes.

    Returns the demonstrations and a stats dict.  Raises
    :class:`ExpertQualityError` when the success rate falls below
    ``min_success``.
    """
    env = TrafficEnv(env_cfg)
    expert = ScriptedExpert(expert_cfg)
    demos, causes = [], {}
    for ep_seed in episode_seeds(seed, n_episodes):
        demo, metrics = run_episode(env, expert, ep_seed)
        causes[demo.info["cause"]] = causes.get(demo.info["cause"], 0) + 1
        if metrics["success"] or keep_failures:
            demos.append(demo)
    n_success = causes.get("success", 0)
    rate = n_success / n_episodes if n_episodes else 1.0
    stats = {"episodes": n_episodes, "successes": n_success, "success_rate": rate, "causes": causes}
    if n_episodes and rate < min_success:
        raise ExpertQualityError(
            f"expert success rate {rate:.2f} < {min_success:.2f} (causes: {causes}); "
            "try a lower desired speed, a larger trigger headway or lower traffic density"
        )
    return demos, stats


def replay_demonstration(demo: ControlDemonstration) -> tuple[np.ndarray, list[np.ndarray]]:
    """Re-step the simulator from the recorded seed and controls.

    Returns the replayed states and the observation at every state index.
    """
    env = TrafficEnv(demo.scenario, keep_log=False)
    observations = [env.reset(demo.seed)]
    states = [env.world.ego.as_array()]
    for u in demo.controls:
        if env.done:
            raise DemoFormatError("demonstration continues past the end of its episode")
        out = env.step_control(u)
        observations.append(out.observation)
        states.append(env.world.ego.as_array())
    return np.array(states), observations


def demo_observations(demo: ControlDemonstration) -> list[np.ndarray]:
    states, obs = replay_demonstration(demo)
    if not np.allclose(states, demo.states, rtol=0.0, atol=1e-9):
        raise DemoFormatError("demonstration does not replay to its recorded states")
    return obs


# ------------------------------------------------------------ file formats
def _header(demo: ControlDemonstration) -> dict:
    return {"kind": "header", "version": FORMAT_VERSION, "scenario": demo.scenario.to_dict(),
            "seed": demo.seed, "steps": len(demo.states), "info": demo.info}


def write_demonstrations(path: str | Path, demos: list[ControlDemonstration]) -> None:
    """JSON lines: per trajectory a header record followed by one record per state."""
    lines = []
    for demo in demos:
        lines.append(json.dumps(_header(demo), sort_keys=True))
        for t, row in enumerate(demo.states):
            rec = {"t": t, **{k: float(v) for k, v in zip(STATE_FIELDS, row)}}
            if t < len(demo.controls):
                rec["steer"], rec["pedal"] = (float(c) for c in demo.controls[t])
            else:
                rec["steer"] = rec["pedal"] = None
            lines.append(json.dumps(rec, sort_keys=True))
    _atomic_write(path, "".join(line + "\n" for line in lines))


def read_demonstrations(path: str | Path) -> list[ControlDemonstration]:
    demos: list[ControlDemonstration] = []
    current = None
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DemoFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise DemoFormatError(f"{path}:{lineno}: expected an object")
        if rec.get("kind") == "header":
            if rec.get("version") != FORMAT_VERSION:
                raise DemoFormatError(f"{path}:{lineno}: unsupported format version {rec.get('version')!r}")
            for key in ("scenario", "seed"):
                if key not in rec:
                    raise DemoFormatError(f"{path}:{lineno}: header is missing field '{key}'")
            current = {"header": rec, "rows": []}
            demos.append(current)
            continue
        if current is None:
            raise DemoFormatError(f"{path}:{lineno}: step record before any header")
        for key in STEP_FIELDS:
            if key not in rec:
                raise DemoFormatError(f"{path}:{lineno}: step record is missing field '{key}'")
        if rec["t"] != len(current["rows"]):
            raise DemoFormatError(f"{path}:{lineno}: expected t={len(current['rows'])}, got {rec['t']}")
        current["rows"].append(rec)
    out = []
    for d in demos:
        rows = d["rows"]
        if not rows:
            raise DemoFormatError(f"{path}: trajectory with seed {d['header']['seed']} has no steps")
        states = np.array([[r[k] for k in STATE_FIELDS] for r in rows], dtype=float)
        controls = np.array([[r["steer"], r["pedal"]] for r in rows[:-1]], dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(controls)):
            raise DemoFormatError(f"{path}: non-finite state or control values")
        try:
            scenario = ScenarioConfig.from_dict(d["header"]["scenario"])
        except (TypeError, ValueError) as exc:
            raise DemoFormatError(f"{path}: bad scenario in header ({exc})") from None
        out.append(ControlDemonstration(scenario, int(d["header"]["seed"]), states, controls,
                                        info=d["header"].get("info", {})))
    return out


def write_skill_records(path: str | Path, records: list[SkillRecord], meta: dict | None = None) -> None:
    """D_theta file: a header then one record per recovered segment."""
    lines = [json.dumps({"kind": "header", "version": FORMAT_VERSION, "meta": meta or {}}, sort_keys=True)]
    for r in records:
        lines.append(json.dumps({
            "traj": r.traj_index,
            "segment": r.segment_index,
            "t": r.t,
            "start": [float(v) for v in r.start_state.as_array()],
            "obs": None if r.obs is None else [float(v) for v in r.obs],
            "theta": [float(v) for v in r.theta.as_array()],
            "residual": float(r.residual),
            "converged": bool(r.converged),
            "flagged": bool(r.flagged),
        }, sort_keys=True))
    _atomic_write(path, "".join(line + "\n" for line in lines))


def read_skill_records(path: str | Path) -> tuple[list[SkillRecord], dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise DemoFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DemoFormatError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("kind") != "header" or header.get("version") != FORMAT_VERSION:
        raise DemoFormatError(f"{path}: missing or unsupported header")
    records = []
    for i, r in enumerate(rows, 2):
        for key in ("traj", "segment", "t", "start", "obs", "theta", "residual", "converged"):
            if key not in r:
                raise DemoFormatError(f"{path}:{i}: record is missing field '{key}'")
        if len(r["theta"]) != 4:
            raise DemoFormatError(f"{path}:{i}: theta must have 4 entries")
        records.append(SkillRecord(
            traj_index=int(r["traj"]), segment_index=int(r["segment"]),
            start_state=VehicleState.from_array(r["start"]),
            theta=SkillParams.from_array(r["theta"]),
            residual=float(r["residual"]), converged=bool(r["converged"]),
            flagged=bool(r.get("flagged", False)),
            obs=None if r["obs"] is None else np.array(r["obs"], dtype=float),
            control=None, t=int(r["t"]),
        ))
    return records, header.get("meta", {})


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
