"""Small numpy neural-network stack: tanh MLPs, Adam, squashed Gaussian policies."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skills import SkillBounds, SkillParams

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_MAGIC = b"ASAPMLP1"


class Mlp:
    """Fully connected network, tanh on hidden layers, linear output.

    ``forward`` records a tape of layer activations; ``backward`` consumes
    it (or an explicitly passed tape) and returns parameter gradients in the
    same order as :attr:`params` plus the gradient w.r.t. the input.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, dtype=np.float32,
                 out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            if i == n_layers - 1:
                limit *= out_scale
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(self.dtype))
            self.params.append(np.zeros(fan_out, dtype=self.dtype))
        self.tape = None

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=self.dtype)
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has width {h.shape[-1]}, network expects {self.sizes[0]}")
        acts = [h]
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        self.tape = acts
        return h

    __call__ = forward

    def backward(self, grad_out, tape=None, param_grads: bool = True):
        """Returns ``(param_grads, input_grad)`` for upstream ``grad_out``.

        With ``param_grads=False`` only the input gradient is computed and the
        first element is None.
        """
        acts = tape if tape is not None else self.tape
        if acts is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_out, dtype=self.dtype)
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            if param_grads:
                grads[2 * i] = acts[i].reshape(-1, acts[i].shape[-1]).T @ g.reshape(-1, g.shape[-1])
                grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.params[2 * i].T
        return (grads if param_grads else None), g

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes, clone.dtype, clone.tape = self.sizes, self.dtype, None
        clone.params = [p.copy() for p in self.params]
        return clone

    def load_from(self, other: "Mlp") -> None:
        if other.sizes != self.sizes:
            raise ValueError("network shapes differ")
        for p, q in zip(self.params, other.params):
            p[...] = q

    def polyak_from(self, source: "Mlp", rate: float) -> None:
        """``self <- rate * source + (1 - rate) * self``."""
        for p, q in zip(self.params, source.params):
            p *= 1.0 - rate
            p += rate * q

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])


@dataclass
class Adam:
    """Adaptive-moment optimizer state for a list of parameter arrays."""

    params: list[np.ndarray]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.params]
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def optim_step(state: Adam, params, grads):
    """Functional wrapper: apply one Adam update to ``params`` (in place) and return them."""
    if any(p is not q for p, q in zip(state.params, params)):
        raise ValueError("optimizer state was built for different parameter arrays")
    state.step(grads)
    return params


# -------------------------------------------------------------- policy head
@dataclass
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    pre: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray
    log_std_raw: np.ndarray | None = None


def split_head(out: np.ndarray):
    """Split actor output into (mean, clamped log-std, raw log-std)."""
    d = out.shape[-1] // 2
    mean, raw = out[..., :d], out[..., d:]
    return mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw


def sech2(u) -> np.ndarray:
    """``1 - tanh(u)^2`` without the cancellation near saturation."""
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / (1.0 + e) ** 2


def squash_correction(pre: np.ndarray) -> np.ndarray:
    """``sum(log(1 - tanh(pre)^2 + eps))``, evaluated from the pre-squash value."""
    return np.sum(np.log(sech2(pre) + SQUASH_EPS), axis=-1)


def gaussian_log_prob(pre, mean, log_std) -> np.ndarray:
    z = (pre - mean) / np.exp(log_std)
    return np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI, axis=-1)


def squashed_log_prob(pre, mean, log_std) -> np.ndarray:
    """Log-density of ``tanh(pre)`` under the squashed Gaussian."""
    return gaussian_log_prob(pre, mean, log_std) - squash_correction(pre)


def policy_from_output(out: np.ndarray, noise: np.ndarray | None) -> GaussianPolicyOutput:
    mean, log_std, raw = split_head(np.asarray(out, dtype=np.float64))
    if noise is None:
        noise = np.zeros_like(mean)
    pre = mean + np.exp(log_std) * noise
    action = np.tanh(pre)
    logp = np.sum(-0.5 * noise**2 - log_std - HALF_LOG_2PI, axis=-1) - squash_correction(pre)
    return GaussianPolicyOutput(mean, log_std, pre, action, logp, noise, raw)


def sample_policy(actor: Mlp, s, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> GaussianPolicyOutput:
    """Reparameterized squashed-Gaussian sample for observation(s) ``s``.

    The deterministic variant returns ``tanh(mean)``.
    """
    out = actor.forward(s)
    d = out.shape[-1] // 2
    if deterministic:
        noise = np.zeros(out.shape[:-1] + (d,))
    else:
        if rng is None:
            raise ValueError("a random generator is required for stochastic sampling")
        noise = rng.standard_normal(out.shape[:-1] + (d,))
    return policy_from_output(out, noise)


def scale_action(a, bounds: SkillBounds) -> np.ndarray:
    """Affine map from [-1, 1]^4 onto the skill-parameter box."""
    a = np.asarray(a, dtype=float)
    lo, hi = bounds.lower, bounds.upper
    return lo + 0.5 * (a + 1.0) * (hi - lo)


def unscale_action(theta, bounds: SkillBounds) -> np.ndarray:
    if isinstance(theta, SkillParams):
        theta = theta.as_array()
    theta = np.asarray(theta, dtype=float)
    lo, hi = bounds.lower, bounds.upper
    return 2.0 * (theta - lo) / (hi - lo) - 1.0


# ------------------------------------------------------------- checkpoints
def save_checkpoint(path: str | Path, nets: dict[str, Mlp], meta: dict | None = None) -> None:
    """Write networks as a JSON header followed by little-endian float32 data."""
    header = {
        "format": 1,
        "dtype": "<f4",
        "activation": "tanh",
        "nets": {name: list(net.sizes) for name, net in nets.items()},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in nets:
            for p in nets[name].params:
                fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    offset = 12 + n
    nets = {}
    for name, sizes in header["nets"].items():
        net = Mlp(sizes, dtype=np.float32)
        for i, p in enumerate(net.params):
            count = p.size
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            net.params[i] = arr.reshape(p.shape).astype(np.float32)
            offset += 4 * count
        nets[name] = net
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing parameter data")
    return nets, header["meta"]
