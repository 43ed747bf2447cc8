from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

PRIOR_MODES = ("no_prior", "bc_only", "init_actor", "kl_init_actor", "double_init")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99  # discount per skill transition
    alpha: float = 0.1  # initial temperature
    target_entropy: float = -4.0
    lr_actor: float = 3e-4
    lr_actor_rl: float | None = None  # actor rate during RL when it differs from behaviour cloning
    lr_critic: float = 3e-4
    lr_alpha: float = 1e-4
    tau: float = 0.005  # target update rate m
    bc_beta: float = 0.01  # entropy weight in behaviour cloning
    T: int = 10  # skill horizon in env steps
    dt: float = 0.1
    batch_size: int = 256
    replay_capacity: int = 200_000
    actor_pretrain_iters: int = 5000
    rollout_steps: int = 20_000
    critic_pretrain_iters: int = 5000
    total_env_steps: int = 60_000
    eval_every: int = 5000
    eval_episodes: int = 10
    prior_mode: str = "double_init"
    kl_weight: float = 0.1
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    double_q: bool = True
    paper_sign_target: bool = False
    learning_starts: int = 256  # skill transitions in the buffer before updates begin
    updates_per_skill: int = 1
    lr_warmup: int = 0  # updates over which actor/critic learning rates ramp linearly from 0
    use_flagged: bool = False  # include recovery records above the residual cutoff in BC

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("target update rate must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("skill horizon T must be >= 1")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"unknown prior mode {self.prior_mode!r}; choose from {PRIOR_MODES}")
        if self.alpha <= 0:
            raise ValueError("initial temperature must be positive")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch size and replay capacity must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**data)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose, derived from one seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def stream_seeds(seed: int, name: str, n: int) -> list[int]:
    if n <= 0:
        return []
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return [int(x) for x in ss.generate_state(n, dtype=np.uint32)]
