"""Skill-space RL loop with prior-mode dispatch, and deterministic evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..nn import Mlp, sample_policy, save_checkpoint, scale_action
from ..sim.env import TrafficEnv, observation_dim
from ..sim.metrics import episode_metrics
from ..sim.scenario import ScenarioConfig
from ..skills import SkillBounds
from .config import TrainConfig, rng_stream, stream_seeds
from .pretrain import TERMINAL_CAUSES, PretrainArtifacts, normalizer, run_skill
from .replay import ReplayBuffer
from .sac import SacLearner, TrainingDiverged

log = logging.getLogger(__name__)

CURVE_FIELDS = ("scenario", "seed", "prior_mode", "T", "iteration", "env_steps", "updates",
                "reward", "success", "completion", "collision", "passed_cars")
STAGES = {"stage1": ("reward",), "stage2": ("success", "completion"), "stage3": ("collision", "passed_cars")}


@dataclass
class TrainResult:
    learner: SacLearner
    curve: list[dict]
    env_steps: int
    updates: int
    wall_time: float
    paths: dict = field(default_factory=dict)
    loss_log: list[dict] = field(default_factory=list)  # mean losses per evaluation interval


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_curve(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_FIELDS)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in CURVE_FIELDS])
    tmp.replace(path)


def read_curve(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("seed", "T", "iteration", "env_steps", "updates"):
            r[k] = int(r[k])
        for k in ("reward", "success", "completion", "collision", "passed_cars"):
            r[k] = float(r[k])
    return rows


# -------------------------------------------------------------- evaluation
def evaluate(actor: Mlp, env_cfg: ScenarioConfig, n_episodes: int, seed: int, T: int = 10,
             bounds: SkillBounds = SkillBounds()) -> dict:
    """Deterministic-policy episodes; means grouped by the three inspection stages."""
    summary = {"episodes": int(n_episodes), "stage1": {}, "stage2": {}, "stage3": {}, "per_episode": []}
    if n_episodes <= 0:
        return summary
    env = TrafficEnv(env_cfg)
    norm = normalizer(env_cfg)
    for ep_seed in stream_seeds(seed, "eval-env", n_episodes):
        obs = env.reset(ep_seed)
        done = False
        while not done:
            a = sample_policy(actor, norm(obs)[None, :], deterministic=True).action[0]
            res = run_skill(env, scale_action(a, bounds), bounds, T)
            obs, done = res.observation, res.done
        m = episode_metrics(env.log)
        summary["per_episode"].append({"seed": ep_seed, **m})
    eps = summary["per_episode"]
    for stage, keys in STAGES.items():
        summary[stage] = {k: float(np.mean([float(e[k]) for e in eps])) for k in keys}
    return summary


def flat_metrics(summary: dict) -> dict:
    out = {}
    for stage in STAGES:
        out.update(summary[stage])
    return out


# ---------------------------------------------------------------- training
def build_learner(cfg: TrainConfig, obs_dim: int, pretrained: PretrainArtifacts | None) -> SacLearner:
    mode = cfg.prior_mode
    init = rng_stream(cfg.seed, "actor-init")
    if mode == "no_prior":
        return SacLearner(obs_dim, cfg, init)
    if pretrained is None:
        raise ValueError(f"prior mode {mode!r} needs a pretrained actor")
    if mode in ("bc_only", "init_actor"):
        return SacLearner(obs_dim, cfg, init, actor=pretrained.actor)
    if mode == "kl_init_actor":
        return SacLearner(obs_dim, cfg, init, actor=pretrained.actor, prior=pretrained.actor)
    if pretrained.critics is None:
        raise ValueError("double_init needs a pretrained critic")
    return SacLearner(obs_dim, cfg, init, actor=pretrained.actor, critics=pretrained.critics,
                      targets=pretrained.targets, log_alpha=pretrained.log_alpha)


def eval_points(cfg: TrainConfig) -> list[int]:
    pts = list(range(0, cfg.total_env_steps + 1, cfg.eval_every)) if cfg.eval_every > 0 else [0]
    if pts[-1] != cfg.total_env_steps:
        pts.append(cfg.total_env_steps)
    return pts


def train(cfg: TrainConfig, env_cfg: ScenarioConfig, pretrained: PretrainArtifacts | None = None,
          out_dir: str | Path | None = None, bounds: SkillBounds = SkillBounds(),
          eval_seed: int | None = None, prefill=None) -> TrainResult:
    """Run the skill-level RL loop for ``cfg.total_env_steps`` environment steps.

    Evaluations happen at every multiple of ``cfg.eval_every`` env steps
    (including 0, before any update) on a fixed set of episode seeds.
    ``prefill`` optionally seeds the replay buffer with earlier skill
    transitions (the critic-pretraining rollouts); they do not count as
    environment steps of this run.
    """
    t0 = time.perf_counter()
    obs_dim = observation_dim(env_cfg.obs_k)
    learner = build_learner(cfg, obs_dim, pretrained)
    eval_seed = cfg.seed + 10_000 if eval_seed is None else eval_seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"train": cfg.to_dict(), "scenario": env_cfg.to_dict(), "eval_seed": eval_seed}, indent=2, sort_keys=True) + "\n")

    env = TrafficEnv(env_cfg, keep_log=False)
    norm = normalizer(env_cfg)
    env_rng = iter(stream_seeds(cfg.seed, "env", max(1, cfg.total_env_steps)))
    act_rng = rng_stream(cfg.seed, "sampling")
    upd_rng = rng_stream(cfg.seed, "updates")
    buffer = ReplayBuffer(cfg.replay_capacity, obs_dim)
    for tr in prefill or ():
        buffer.add(tr.obs, tr.action, tr.reward, tr.next_obs, tr.done)
    learn = cfg.prior_mode != "bc_only"

    points = eval_points(cfg)
    curve: list[dict] = []
    next_pt = 0
    env_steps, skills = 0, 0

    interval: list[dict] = []
    loss_log: list[dict] = []

    def record(point: int) -> None:
        if interval:
            loss_log.append({"env_steps": point, **{k: float(np.mean([d[k] for d in interval])) for k in interval[0]}})
            interval.clear()
        summary = evaluate(learner.actor, env_cfg, cfg.eval_episodes, eval_seed, cfg.T, bounds)
        row = {"scenario": env_cfg.kind, "seed": cfg.seed, "prior_mode": cfg.prior_mode, "T": cfg.T,
               "iteration": skills, "env_steps": point, "updates": learner.updates,
               **{k: 0.0 for k in ("reward", "success", "completion", "collision", "passed_cars")}}
        if summary["episodes"]:
            row.update(flat_metrics(summary))
        curve.append(row)
        log.info("env_steps=%d reward=%.3f success=%.2f", point, row["reward"], row["success"])

    obs = None
    try:
        while True:
            while next_pt < len(points) and env_steps >= points[next_pt]:
                record(points[next_pt])
                next_pt += 1
            if env_steps >= cfg.total_env_steps:
                break
            if obs is None:
                obs = norm(env.reset(next(env_rng)))
            a = learner.act(obs, act_rng)
            res = run_skill(env, scale_action(a, bounds), bounds, cfg.T)
            env_steps += res.steps
            skills += 1
            next_obs = norm(res.observation)
            buffer.add(obs, a, res.reward, next_obs, res.cause in TERMINAL_CAUSES)
            obs = None if res.done else next_obs
            if learn and len(buffer) >= cfg.learning_starts:
                for _ in range(cfg.updates_per_skill):
                    interval.append(learner.update(buffer.sample(cfg.batch_size, upd_rng), upd_rng))
    except TrainingDiverged as exc:
        if out is not None:
            (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2, sort_keys=True) + "\n")
        raise

    result = TrainResult(learner, curve, env_steps, learner.updates, time.perf_counter() - t0,
                         loss_log=loss_log)
    if out is not None:
        write_curve(out / "curve.csv", curve)
        save_checkpoint(out / "actor.ckpt", {"actor": learner.actor},
                        {"role": "actor", "T": cfg.T, "prior_mode": cfg.prior_mode})
        nets = {f"q{i}": c for i, c in enumerate(learner.critics)}
        nets.update({f"target{i}": t for i, t in enumerate(learner.targets)})
        save_checkpoint(out / "critic.ckpt", nets, {"role": "critic", "log_alpha": float(learner.log_alpha[0])})
        result.paths = {"curve": out / "curve.csv", "actor": out / "actor.ckpt", "critic": out / "critic.ckpt"}
    return result


def first_reaching(curve: list[dict], key: str, threshold: float) -> float:
    """Env steps at the first evaluation with ``key >= threshold`` (inf if never)."""
    for row in curve:
        if row[key] >= threshold:
            return float(row["env_steps"])
    return math.inf
