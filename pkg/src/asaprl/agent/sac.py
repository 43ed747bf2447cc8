"""Maximum-entropy actor-critic over skill parameters."""

from __future__ import annotations

import math

import numpy as np

from ..nn import Adam, Mlp, policy_from_output, sample_policy, split_head, squash_correction
from .config import TrainConfig
from .losses import actor_loss, alpha_loss, critic_loss
from .replay import Batch

ACT_DIM = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def make_actor(obs_dim: int, hidden, rng: np.random.Generator, dtype=np.float32) -> Mlp:
    return Mlp([obs_dim, *hidden, 2 * ACT_DIM], rng=rng, dtype=dtype)


def make_critic(obs_dim: int, hidden, rng: np.random.Generator, dtype=np.float32) -> Mlp:
    return Mlp([obs_dim + ACT_DIM, *hidden, 1], rng=rng, dtype=dtype)


def prior_log_prob(prior: Mlp, obs: np.ndarray, pre: np.ndarray) -> np.ndarray:
    mean, log_std, _ = split_head(np.asarray(prior.forward(obs), dtype=np.float64))
    z = (pre - mean) / np.exp(log_std)
    gauss = np.sum(-0.5 * z**2 - log_std - 0.5 * math.log(2 * math.pi), axis=-1)
    return gauss - squash_correction(pre)


class SacLearner:
    """Actor, one or two critics, target critics and the temperature.

    ``prior`` (a frozen actor) switches the entropy term to the KL estimate
    against it, with fixed weight ``cfg.kl_weight``.
    """

    def __init__(self, obs_dim: int, cfg: TrainConfig, rng_init: np.random.Generator,
                 actor: Mlp | None = None, critics: list[Mlp] | None = None,
                 targets: list[Mlp] | None = None, log_alpha: float | None = None,
                 prior: Mlp | None = None, dtype=np.float32):
        self.cfg = cfg
        self.obs_dim = obs_dim
        n_q = 2 if cfg.double_q else 1
        self.actor = actor.copy() if actor is not None else make_actor(obs_dim, cfg.hidden, rng_init, dtype)
        if critics is not None:
            if len(critics) < n_q:
                raise ValueError(f"need {n_q} critics, got {len(critics)}")
            self.critics = [c.copy() for c in critics[:n_q]]
        else:
            self.critics = [make_critic(obs_dim, cfg.hidden, rng_init, dtype) for _ in range(n_q)]
        if targets is not None:
            self.targets = [t.copy() for t in targets[:n_q]]
        else:
            self.targets = [c.copy() for c in self.critics]
        self.log_alpha = np.array([math.log(cfg.alpha) if log_alpha is None else float(log_alpha)])
        self.prior = prior.copy() if prior is not None else None
        self.actor_lr = cfg.lr_actor if cfg.lr_actor_rl is None else cfg.lr_actor_rl
        self.actor_opt = Adam(self.actor.params, lr=self.actor_lr)
        self.critic_opts = [Adam(c.params, lr=cfg.lr_critic) for c in self.critics]
        self.alpha_opt = Adam([self.log_alpha], lr=cfg.lr_alpha)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def reg_weight(self) -> float:
        return self.cfg.kl_weight if self.prior is not None else self.alpha

    def act(self, obs: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> np.ndarray:
        pol = sample_policy(self.actor, np.asarray(obs)[None, :], rng, deterministic)
        return pol.action[0]

    def soft_target(self, batch: Batch, noise: np.ndarray) -> np.ndarray:
        """Bootstrapped critic target using a fresh next-action sample."""
        cfg = self.cfg
        pol = policy_from_output(self.actor.forward(batch.next_obs), noise)
        x = np.concatenate([batch.next_obs, pol.action], axis=-1)
        q_next = np.min(np.stack([t.forward(x)[:, 0] for t in self.targets]), axis=0).astype(np.float64)
        if self.prior is not None:
            reg = pol.log_prob - prior_log_prob(self.prior, batch.next_obs, pol.pre)
            soft = q_next - self.reg_weight * reg
        elif cfg.paper_sign_target:
            soft = q_next - self.alpha * (-pol.log_prob)  # literal "Q - alpha * H"
        else:
            soft = q_next - self.alpha * pol.log_prob
        return batch.rew + cfg.gamma * (1.0 - batch.done) * soft

    def update_critics(self, batch: Batch, rng: np.random.Generator) -> float:
        noise = rng.standard_normal((len(batch), ACT_DIM))
        target = self.soft_target(batch, noise)
        total = 0.0
        for critic, opt in zip(self.critics, self.critic_opts):
            loss, grads = critic_loss(critic, batch.obs, batch.act, target)
            opt.step(grads)
            total += loss
        return total

    def update_targets(self) -> None:
        for t, c in zip(self.targets, self.critics):
            t.polyak_from(c, self.cfg.tau)

    def update(self, batch: Batch, rng: np.random.Generator, update_alpha: bool = True) -> dict:
        """One full SAC step: critics, actor, temperature, then target networks."""
        cfg = self.cfg
        ramp = min(1.0, (self.updates + 1) / cfg.lr_warmup) if cfg.lr_warmup > 0 else 1.0
        self.actor_opt.lr = self.actor_lr * ramp
        for opt in self.critic_opts:
            opt.lr = cfg.lr_critic * ramp
        q_loss = self.update_critics(batch, rng)
        noise = rng.standard_normal((len(batch), ACT_DIM))
        pi_loss, grads, info = actor_loss(self.actor, self.critics, batch.obs, noise,
                                          self.reg_weight, prior=self.prior)
        self.actor_opt.step(grads)
        a_loss = 0.0
        if update_alpha and self.prior is None:
            a_loss, g = alpha_loss(float(self.log_alpha[0]), info["log_prob"], cfg.target_entropy)
            self.alpha_opt.step([np.array([g])])
        self.update_targets()
        self.updates += 1
        losses = {
            "critic": q_loss,
            "actor": pi_loss,
            "alpha_loss": a_loss,
            "alpha": self.alpha,
            "entropy": float(-np.mean(info["log_prob"])),
            "q": float(np.mean(info["q"])),
        }
        bad = [k for k, v in losses.items() if not math.isfinite(v)]
        if bad:
            raise TrainingDiverged(
                f"non-finite loss values {bad} at update {self.updates}",
                {"update": self.updates, "losses": losses,
                 "batch_reward": [float(np.min(batch.rew)), float(np.max(batch.rew))],
                 "log_alpha": float(self.log_alpha[0])},
            )
        return losses
