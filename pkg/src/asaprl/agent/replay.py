from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rew)


class ReplayBuffer:
    """Fixed-capacity ring buffer of skill transitions ``(s, a, r, s', done)``."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 4):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.ptr = 0
        self.size = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, rew: float, next_obs, done: bool) -> None:
        i = self.ptr
        self.obs[i], self.act[i], self.rew[i] = obs, act, rew
        self.next_obs[i], self.done[i] = next_obs, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sample without replacement (the whole buffer if it is smaller)."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(batch_size, self.size)
        idx = rng.choice(self.size, size=n, replace=False)
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx], idx)
