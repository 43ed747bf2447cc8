"""Inverse recovery of skill parameters from demonstrated trajectories.

Each demonstrated segment ``X_d`` is matched by the bound-constrained
least-squares problem::

    theta = argmin_theta  sum_t  w_xy |p_t^d - p_t|^2 + w_phi (phi_t^d - phi_t)^2
                               + w_v (v_t^d - v_t)^2 + w_a (a_t^d - a_t)^2

with ``X = f_s(theta)`` the forward skill generator.  The solver is a
projected Levenberg-Marquardt iteration with forward-difference Jacobians;
all starts are advanced in lockstep so every iteration costs two batched
forward evaluations regardless of the number of starts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .skills import (
    DEFAULT_DT,
    DEFAULT_T,
    SkillBounds,
    SkillParams,
    Trajectory,
    VehicleState,
    rollout_batch,
    to_ego_frame,
    wrap_angle,
)

log = logging.getLogger(__name__)

_LHS_BLOCK = 6
HISTOGRAM_EDGES = (0.0, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, float("inf"))


@dataclass(frozen=True)
class RecoveryConfig:
    n_starts: int = 8
    max_iters: int = 60
    ftol: float = 1e-10
    xtol: float = 1e-10
    weights: tuple[float, float, float, float] = (1.0, 10.0, 0.5, 0.1)
    residual_cutoff: float = 0.5
    T: int = DEFAULT_T
    dt: float = DEFAULT_DT
    seed: int = 0

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")


@dataclass
class RecoveryResult:
    theta_hat: SkillParams
    residual: float
    starts_tried: int
    converged: bool
    start_costs: list[float] = field(default_factory=list, repr=False)


@dataclass
class SkillRecord:
    """One entry of the skill-space demonstration store."""

    traj_index: int
    segment_index: int
    start_state: VehicleState
    theta: SkillParams
    residual: float
    converged: bool
    flagged: bool
    obs: np.ndarray | None = None
    control: tuple[float, float] | None = None
    t: int = 0


def _weight_vector(weights, T: int) -> np.ndarray:
    w_xy, w_phi, w_v, w_a = weights
    return np.tile(np.sqrt([w_xy, w_xy, w_phi, w_v, w_a]), T)


def residual_vector(X_d: np.ndarray, X: np.ndarray, weights) -> np.ndarray:
    """Weighted residuals for one or many generated trajectories.

    ``X_d`` is (T, 5); ``X`` is (T, 5) or (N, T, 5).  Returns (5T,) or (N, 5T).
    """
    diff = np.asarray(X) - X_d
    diff[..., 2] = wrap_angle(diff[..., 2])
    flat = diff.reshape(diff.shape[:-2] + (-1,))
    return flat * _weight_vector(weights, X_d.shape[0])


def objective_residual(X_d, X, weights) -> float:
    """Square root of the weighted sum of squares (the reported residual)."""
    r = residual_vector(np.asarray(X_d, dtype=float), np.asarray(X, dtype=float), weights)
    return float(np.sqrt(np.sum(r * r)))


def initial_guesses(X_d: np.ndarray, start_state: VehicleState, bounds: SkillBounds, cfg: RecoveryConfig) -> np.ndarray:
    """Deterministic list of starting points (prefix-stable in ``n_starts``)."""
    T_sec = cfg.T * cfg.dt
    guesses = [
        [0.0, 0.0, start_state.v + start_state.a * T_sec, 0.0],
        to_ego_frame(start_state, X_d[-1:])[0, 1:5],
    ]
    block = 0
    while len(guesses) < cfg.n_starts:
        sampler = qmc.LatinHypercube(d=4, seed=np.random.default_rng([cfg.seed, block]))
        unit = sampler.random(_LHS_BLOCK)
        guesses.extend(qmc.scale(unit, bounds.lower, bounds.upper))
        block += 1
    return bounds.clip(np.array(guesses[: cfg.n_starts], dtype=float))


def _fd_steps(theta: np.ndarray, bounds: SkillBounds) -> np.ndarray:
    h = 1e-6 * np.maximum(1.0, np.abs(theta))
    return np.where(theta + h > bounds.upper, -h, h)


def _solve_lm(X_d, origin, theta0, bounds, cfg):
    """Lockstep projected LM over all starts; returns (thetas, costs, converged)."""
    lo, hi = bounds.lower, bounds.upper
    S = len(theta0)
    theta = theta0.copy()

    def evaluate(th):
        X = rollout_batch(origin, th, bounds, cfg.T, cfg.dt)
        return residual_vector(X_d, X, cfg.weights)

    r = evaluate(theta)
    cost = np.sum(r * r, axis=1)
    lam = np.full(S, 1e-3)
    active = np.ones(S, dtype=bool)
    converged = np.zeros(S, dtype=bool)
    eye = np.eye(4)

    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        th = theta[idx]
        h = _fd_steps(th, bounds)
        pert = np.repeat(th[:, None, :], 4, axis=1) + h[:, :, None] * eye[None]
        rp = evaluate(pert.reshape(-1, 4)).reshape(idx.size, 4, -1)
        J = (rp - r[idx][:, None, :]) / h[:, :, None]  # (k, 4, m), rows are d r / d theta_i
        J = np.transpose(J, (0, 2, 1))
        g = np.einsum("kmi,km->ki", J, r[idx])
        A = np.einsum("kmi,kmj->kij", J, J)

        # freeze coordinates pinned at a bound with the descent direction pointing out
        pinned = ((th <= lo + 1e-12) & (g > 0)) | ((th >= hi - 1e-12) & (g < 0))
        diag = np.maximum(np.diagonal(A, axis1=1, axis2=2), 1e-12)
        M = A + lam[idx, None, None] * diag[:, :, None] * eye[None]
        M = np.where(pinned[:, :, None] | pinned[:, None, :], 0.0, M)
        M[:, range(4), range(4)] = np.where(pinned, 1.0, M[:, range(4), range(4)])
        rhs = np.where(pinned, 0.0, -g)
        step = np.linalg.solve(M, rhs[..., None])[..., 0]
        trial = np.clip(th + step, lo, hi)

        rt = evaluate(trial)
        ct = np.sum(rt * rt, axis=1)
        better = ct < cost[idx]
        moved = np.max(np.abs(trial - th) / np.maximum(1.0, np.abs(th)), axis=1)

        for j, k in enumerate(idx):
            if better[j]:
                rel = (cost[k] - ct[j]) / max(cost[k], 1e-300)
                theta[k], r[k], cost[k] = trial[j], rt[j], ct[j]
                lam[k] = max(lam[k] / 3.0, 1e-9)
                if rel < cfg.ftol or cost[k] < 1e-24 or moved[j] < cfg.xtol:
                    converged[k], active[k] = True, False
            else:
                lam[k] *= 4.0
                if lam[k] > 1e12 or moved[j] < cfg.xtol:
                    # no descent left from this point
                    converged[k], active[k] = True, False
    return theta, cost, converged


def recover(
    X_d: Trajectory | np.ndarray,
    start_state: VehicleState,
    bounds: SkillBounds,
    cfg: RecoveryConfig = RecoveryConfig(),
) -> RecoveryResult:
    """Find the in-bounds skill parameters best reproducing ``X_d``.

    Never raises on numerical trouble; a failed fit is reported through
    ``converged=False`` with the best parameters found.
    """
    arr = X_d.array if isinstance(X_d, Trajectory) else np.asarray(X_d, dtype=float)
    if arr.shape != (cfg.T, 5):
        raise ValueError(f"expected a ({cfg.T}, 5) segment, got {arr.shape}")
    starts = initial_guesses(arr, start_state, bounds, cfg)
    try:
        thetas, costs, conv = _solve_lm(arr, start_state.as_array(), starts, bounds, cfg)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:  # pragma: no cover - defensive
        log.warning("recovery solve failed: %s", exc)
        thetas, conv = starts, np.zeros(len(starts), dtype=bool)
        costs = np.array([objective_residual(arr, rollout_batch(start_state.as_array(), t[None], bounds, cfg.T, cfg.dt)[0], cfg.weights) ** 2 for t in starts])
    costs = np.where(np.isfinite(costs), costs, np.inf)
    best = int(np.argmin(costs))  # argmin keeps the lowest index on ties
    return RecoveryResult(
        theta_hat=SkillParams.from_array(thetas[best]),
        residual=float(np.sqrt(costs[best])),
        starts_tried=len(starts),
        converged=bool(conv[best]),
        start_costs=[float(c) for c in costs],
    )


def segment_demonstration(states, T: int) -> list[tuple[VehicleState, np.ndarray]]:
    """Split a state sequence into consecutive non-overlapping T-step windows.

    Index 0 is the initial state; segment k covers indices ``k*T+1 .. (k+1)*T``
    and starts from state ``k*T``.  A trailing remainder shorter than T is
    dropped.
    """
    arr = np.asarray(states, dtype=float)
    if arr.ndim != 2 or len(arr) < T + 1:
        return []
    n_seg = (len(arr) - 1) // T
    return [
        (VehicleState.from_array(arr[k * T]), arr[k * T + 1 : (k + 1) * T + 1].copy())
        for k in range(n_seg)
    ]


def annotate_demonstrations(
    demos,
    bounds: SkillBounds,
    cfg: RecoveryConfig = RecoveryConfig(),
    observe=None,
) -> list[SkillRecord]:
    """Convert control-space demonstrations into skill-space records.

    Args:
        demos: iterable of objects with a ``states`` array of shape (N, 5)
            (and optionally ``controls``); controls are not used for fitting.
        observe: optional callable ``(traj_index, demo) -> sequence of
            observations`` indexed like ``demo.states``; when given, each
            record carries the observation at its segment start.
    """
    records: list[SkillRecord] = []
    for ti, demo in enumerate(demos):
        segments = segment_demonstration(demo.states, cfg.T)
        if not segments:
            continue
        observations = observe(ti, demo) if observe is not None else None
        controls = getattr(demo, "controls", None)
        for k, (start, X_d) in enumerate(segments):
            t_idx = k * cfg.T
            try:
                res = recover(X_d, start, bounds, cfg)
            except Exception as exc:  # a bad segment must not stop the batch
                log.warning("trajectory %d segment %d: recovery failed (%s)", ti, k, exc)
                continue
            records.append(
                SkillRecord(
                    traj_index=ti,
                    segment_index=k,
                    start_state=start,
                    theta=res.theta_hat,
                    residual=res.residual,
                    converged=res.converged,
                    flagged=res.residual > cfg.residual_cutoff,
                    obs=None if observations is None else np.asarray(observations[t_idx], dtype=float),
                    control=None if controls is None else tuple(float(c) for c in controls[t_idx]),
                    t=t_idx,
                )
            )
    return records


def recovery_report(records: list[SkillRecord]) -> dict:
    residuals = np.array([r.residual for r in records], dtype=float)
    counts, _ = np.histogram(residuals, bins=np.array(HISTOGRAM_EDGES))
    n = len(records)
    return {
        "n_records": n,
        "convergence_rate": float(np.mean([r.converged for r in records])) if n else 0.0,
        "flagged": int(sum(r.flagged for r in records)),
        "mean_residual": float(residuals.mean()) if n else 0.0,
        "median_residual": float(np.median(residuals)) if n else 0.0,
        "max_residual": float(residuals.max()) if n else 0.0,
        "histogram": [
            {"lo": lo, "hi": hi if np.isfinite(hi) else None, "count": int(c)}
            for lo, hi, c in zip(HISTOGRAM_EDGES[:-1], HISTOGRAM_EDGES[1:], counts)
        ],
    }
