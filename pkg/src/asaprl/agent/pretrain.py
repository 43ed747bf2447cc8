"""Expert-prior learning: behaviour cloning in skill space, rollouts, critic pretraining."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..nn import (
    Adam,
    Mlp,
    load_checkpoint,
    sample_policy,
    save_checkpoint,
    scale_action,
    split_head,
    squash_correction,
    unscale_action,
)
from ..recovery import SkillRecord
from ..sim.env import TrafficEnv, observation_dim, observation_scale
from ..sim.scenario import ScenarioConfig
from ..skills import SkillBounds, SkillParams, generate_skill
from .config import TrainConfig, rng_stream, stream_seeds
from .losses import bc_loss
from .replay import Batch
from .sac import ACT_DIM, SacLearner, make_actor

TERMINAL_CAUSES = ("crash", "off-road", "success")
BC_CLIP = 0.999
HELDOUT_FRACTION = 0.1


@dataclass
class SkillTransition:
    obs: np.ndarray  # normalized observation
    action: np.ndarray  # policy action in [-1, 1]^4
    theta: np.ndarray  # skill parameters
    reward: float  # undiscounted sum over the executed steps
    next_obs: np.ndarray
    done: bool  # terminal (timeouts are not terminal)
    steps: int
    episode: int
    provenance: str = ""


@dataclass
class PretrainArtifacts:
    actor: Mlp
    critics: list[Mlp] | None = None
    targets: list[Mlp] | None = None
    log_alpha: float | None = None
    meta: dict = field(default_factory=dict)


def actor_digest(actor: Mlp) -> str:
    h = hashlib.sha256()
    for p in actor.params:
        h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def normalizer(env_cfg: ScenarioConfig):
    scale = observation_scale(env_cfg)
    return lambda obs: np.asarray(obs, dtype=float) / scale


# ------------------------------------------------------------------ actor
def bc_dataset(records: list[SkillRecord], env_cfg: ScenarioConfig, bounds: SkillBounds,
               use_flagged: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Normalized observations and pre-squash targets for behaviour cloning."""
    if not records:
        raise ValueError("skill dataset is empty")
    norm = normalizer(env_cfg)
    obs, pre = [], []
    for r in records:
        theta = r.theta.as_array()
        if not bounds.contains(theta):
            raise ValueError(f"skill record (traj {r.traj_index}, segment {r.segment_index}) has out-of-bounds theta {theta}")
        if r.obs is None:
            raise ValueError("skill records need observations for pretraining")
        if r.flagged and not use_flagged:
            continue
        a = np.clip(unscale_action(theta, bounds), -BC_CLIP, BC_CLIP)
        obs.append(norm(r.obs))
        pre.append(np.arctanh(a))
    if not obs:
        raise ValueError("no usable skill records after filtering flagged segments")
    return np.array(obs), np.array(pre)


def log_likelihood(actor: Mlp, obs: np.ndarray, pre: np.ndarray) -> float:
    mean, log_std, _ = split_head(np.asarray(actor.forward(obs), dtype=np.float64))
    z = (pre - mean) / np.exp(log_std)
    lp = np.sum(-0.5 * z**2 - log_std - 0.5 * math.log(2 * math.pi), axis=-1) - squash_correction(pre)
    return float(np.mean(lp))


def policy_entropy(actor: Mlp, obs: np.ndarray, rng: np.random.Generator, n: int = 16) -> float:
    """Mean single-sample entropy estimate over ``obs`` (``n`` draws each)."""
    total = 0.0
    for _ in range(n):
        total += float(-np.mean(sample_policy(actor, obs, rng).log_prob))
    return total / n


def pretrain_actor(records: list[SkillRecord], env_cfg: ScenarioConfig, cfg: TrainConfig,
                   bounds: SkillBounds = SkillBounds(), obs=None, pre=None) -> tuple[Mlp, dict]:
    """Behaviour cloning: ascend ``log pi(theta|s) + beta * H`` over the skill dataset.

    ``obs``/``pre`` may be passed directly (normalized observations and
    pre-squash targets) instead of ``records``.
    """
    if obs is None:
        obs, pre = bc_dataset(records, env_cfg, bounds, cfg.use_flagged)
    n = len(obs)
    if n == 0:
        raise ValueError("skill dataset is empty")
    split_rng = rng_stream(cfg.seed, "bc-split")
    perm = split_rng.permutation(n)
    n_held = int(round(HELDOUT_FRACTION * n)) if n >= 10 else 0
    held, train_idx = perm[:n_held], perm[n_held:]
    actor = make_actor(obs.shape[1], cfg.hidden, rng_stream(cfg.seed, "actor-init"))
    opt = Adam(actor.params, lr=cfg.lr_actor)
    rng = rng_stream(cfg.seed, "bc-sampling")
    ll_before = log_likelihood(actor, obs[held], pre[held]) if n_held else float("nan")
    curve = []
    best, best_ll, best_it = actor.copy(), ll_before, 0
    batch = min(cfg.batch_size, len(train_idx))
    for it in range(1, cfg.actor_pretrain_iters + 1):
        idx = train_idx[rng.choice(len(train_idx), size=batch, replace=False)]
        noise = rng.standard_normal((batch, ACT_DIM))
        loss, grads, _ = bc_loss(actor, obs[idx], pre[idx], noise, cfg.bc_beta)
        if not math.isfinite(loss):
            raise FloatingPointError(f"behaviour cloning loss became non-finite at iteration {it}")
        opt.step(grads)
        if it % 100 == 0 or it == cfg.actor_pretrain_iters:
            ll = log_likelihood(actor, obs[held], pre[held]) if n_held else float("nan")
            curve.append({"stage": "actor", "iteration": it, "loss": loss, "heldout_ll": ll})
            # keep the checkpoint with the best held-out likelihood
            if not n_held or ll > best_ll:
                best, best_ll, best_it = actor.copy(), ll, it
    ll_after = log_likelihood(best, obs[held], pre[held]) if n_held else float("nan")
    stats = {"records": n, "heldout": int(n_held), "heldout_ll_before": ll_before,
             "heldout_ll_after": ll_after, "best_iteration": best_it, "curve": curve}
    return best, stats


# --------------------------------------------------------------- rollouts
def run_skill(env: TrafficEnv, theta: np.ndarray, bounds: SkillBounds, T: int):
    traj = generate_skill(env.world.ego, SkillParams.from_array(theta), bounds, T, env.cfg.dt)
    return env.step_skill(traj)


def collect_skill_rollouts(actor: Mlp, env_cfg: ScenarioConfig, cfg: TrainConfig, n_steps: int,
                           bounds: SkillBounds = SkillBounds(), seed: int | None = None,
                           env_logs: list | None = None) -> list[SkillTransition]:
    """Roll out the (stochastic) pretrained actor for ``n_steps`` env steps.

    When ``env_logs`` is a list, each finished or interrupted episode's
    per-step log is appended to it.
    """
    seed = cfg.seed if seed is None else seed
    env = TrafficEnv(env_cfg, keep_log=env_logs is not None)
    norm = normalizer(env_cfg)
    rng = rng_stream(seed, "rollout-sampling")
    ep_seeds = iter(stream_seeds(seed, "rollout-env", max(1, n_steps)))
    provenance = actor_digest(actor)
    out: list[SkillTransition] = []
    steps, episode = 0, -1
    obs = None
    while steps < n_steps:
        if obs is None:
            episode += 1
            obs = norm(env.reset(next(ep_seeds)))
        action = sample_policy(actor, obs[None, :], rng).action[0]
        theta = scale_action(action, bounds)
        res = run_skill(env, theta, bounds, cfg.T)
        steps += res.steps
        next_obs = norm(res.observation)
        out.append(SkillTransition(obs, action, theta, res.reward, next_obs,
                                   res.cause in TERMINAL_CAUSES, res.steps, episode, provenance))
        obs = None if res.done else next_obs
        if res.done and env_logs is not None:
            env_logs.append(list(env.log))
    if obs is not None and env_logs is not None:
        env_logs.append(list(env.log))
    return out


def transitions_batch(trans: list[SkillTransition]) -> Batch:
    return Batch(
        np.array([t.obs for t in trans]), np.array([t.action for t in trans]),
        np.array([t.reward for t in trans], dtype=float), np.array([t.next_obs for t in trans]),
        np.array([float(t.done) for t in trans]),
    )


# ----------------------------------------------------------------- critic
def pretrain_critic(transitions: list[SkillTransition], actor: Mlp, cfg: TrainConfig,
                    obs_dim: int | None = None) -> tuple[SacLearner, dict]:
    """Policy evaluation of the frozen pretrained actor on the rollout dataset.

    Returns a learner holding the pretrained actor, critics and targets.
    """
    if not transitions:
        raise ValueError("rollout dataset is empty")
    data = transitions_batch(transitions)
    obs_dim = obs_dim or data.obs.shape[1]
    learner = SacLearner(obs_dim, cfg, rng_stream(cfg.seed, "critic-init"), actor=actor)
    n = len(data)
    perm = rng_stream(cfg.seed, "critic-split").permutation(n)
    n_held = int(round(HELDOUT_FRACTION * n)) if n >= 10 else 0
    held, train_idx = perm[:n_held], perm[n_held:]
    rng = rng_stream(cfg.seed, "critic-sampling")
    eval_noise = rng_stream(cfg.seed, "critic-eval").standard_normal((max(n_held, 1), ACT_DIM))
    batch = min(cfg.batch_size, len(train_idx))

    def held_td() -> float:
        if not n_held:
            return float("nan")
        sub = Batch(data.obs[held], data.act[held], data.rew[held], data.next_obs[held], data.done[held])
        target = learner.soft_target(sub, eval_noise[:n_held])
        x = np.concatenate([sub.obs, sub.act], axis=-1)
        return float(0.5 * np.mean((learner.critics[0].forward(x)[:, 0] - target) ** 2))

    curve = [{"stage": "critic", "iteration": 0, "loss": float("nan"), "heldout_td": held_td()}]
    for it in range(cfg.critic_pretrain_iters):
        idx = train_idx[rng.choice(len(train_idx), size=batch, replace=False)]
        sub = Batch(data.obs[idx], data.act[idx], data.rew[idx], data.next_obs[idx], data.done[idx])
        loss = learner.update_critics(sub, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"critic pretraining loss became non-finite at iteration {it}")
        learner.update_targets()
        if (it + 1) % 100 == 0 or it == cfg.critic_pretrain_iters - 1:
            curve.append({"stage": "critic", "iteration": it + 1, "loss": loss, "heldout_td": held_td()})
    stats = {"transitions": n, "heldout": int(n_held), "heldout_td_first": curve[0]["heldout_td"],
             "heldout_td_last": curve[-1]["heldout_td"], "curve": curve}
    return learner, stats


def pretrain_pipeline(records: list[SkillRecord], env_cfg: ScenarioConfig, cfg: TrainConfig,
                      bounds: SkillBounds = SkillBounds()) -> tuple[PretrainArtifacts, list[SkillTransition], dict]:
    """Actor cloning, rollout collection and critic pretraining in sequence."""
    actor, a_stats = pretrain_actor(records, env_cfg, cfg, bounds)
    rollouts = collect_skill_rollouts(actor, env_cfg, cfg, cfg.rollout_steps, bounds)
    learner, c_stats = pretrain_critic(rollouts, actor, cfg, observation_dim(env_cfg.obs_k))
    arts = PretrainArtifacts(actor, learner.critics, learner.targets, float(learner.log_alpha[0]),
                             meta={"provenance": actor_digest(actor), "T": cfg.T})
    return arts, rollouts, {"actor": a_stats, "critic": c_stats}


# -------------------------------------------------------------------- I/O
def save_pretrained(out_dir: str | Path, arts: PretrainArtifacts) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"actor": out / "actor.ckpt"}
    save_checkpoint(paths["actor"], {"actor": arts.actor}, {**arts.meta, "role": "actor"})
    if arts.critics is not None:
        paths["critic"] = out / "critic.ckpt"
        nets = {f"q{i}": c for i, c in enumerate(arts.critics)}
        nets.update({f"target{i}": t for i, t in enumerate(arts.targets)})
        save_checkpoint(paths["critic"], nets, {**arts.meta, "role": "critic", "log_alpha": arts.log_alpha})
    return paths


def load_actor(path: str | Path) -> tuple[Mlp, dict]:
    nets, meta = load_checkpoint(path)
    if "actor" not in nets:
        raise ValueError(f"{path}: no actor network in checkpoint")
    return nets["actor"], meta


def load_pretrained(actor_path: str | Path, critic_path: str | Path | None = None) -> PretrainArtifacts:
    actor, meta = load_actor(actor_path)
    arts = PretrainArtifacts(actor, meta=meta)
    if critic_path is not None:
        nets, cmeta = load_checkpoint(critic_path)
        arts.critics = [nets[k] for k in sorted(nets) if k.startswith("q")]
        arts.targets = [nets[k] for k in sorted(nets) if k.startswith("target")]
        arts.log_alpha = cmeta.get("log_alpha")
    return arts


def write_rollouts(path: str | Path, trans: list[SkillTransition]) -> None:
    lines = []
    for t in trans:
        lines.append(json.dumps({
            "obs": [float(v) for v in t.obs], "action": [float(v) for v in t.action],
            "theta": [float(v) for v in t.theta], "reward": float(t.reward),
            "next_obs": [float(v) for v in t.next_obs], "done": bool(t.done),
            "steps": int(t.steps), "episode": int(t.episode), "provenance": t.provenance,
        }, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    tmp.replace(path)


def read_rollouts(path: str | Path) -> list[SkillTransition]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        out.append(SkillTransition(np.array(r["obs"]), np.array(r["action"]), np.array(r["theta"]),
                                   float(r["reward"]), np.array(r["next_obs"]), bool(r["done"]),
                                   int(r["steps"]), int(r["episode"]), r.get("provenance", "")))
    return out
