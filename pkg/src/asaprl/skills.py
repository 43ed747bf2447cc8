"""Parameterized motion skills.

A skill is generated from the vehicle's current state and four end-boundary
parameters ``(y_e, phi_e, v_e, a_e)``:

1. a cubic path ``y(x)`` in the ego frame from the origin to ``(x_e, y_e)``
   with end heading ``phi_e``,
2. a cubic speed profile ``v(t)`` matching the current speed/acceleration at
   ``t=0`` and ``(v_e, a_e)`` at the end of the window,
3. the integral of the speed profile projected onto the path by arc length.

The vectorized core (:func:`rollout_batch`) evaluates many parameter sets at
once; the recovery optimizer relies on it for cheap Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

X_E_FLOOR = 2.0
N_ARC = 512
DEFAULT_T = 10
DEFAULT_DT = 0.1

# column order of trajectory arrays
STATE_FIELDS = ("x", "y", "phi", "v", "a")


def wrap_angle(angle):
    """Wrap angle(s) into [-pi, pi)."""
    return (np.asarray(angle) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    phi: float
    v: float
    a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.v, self.a], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        x, y, phi, v, a = (float(c) for c in arr)
        return cls(x, y, phi, v, a)


@dataclass(frozen=True)
class SkillParams:
    y_e: float
    phi_e: float
    v_e: float
    a_e: float

    def as_array(self) -> np.ndarray:
        return np.array([self.y_e, self.phi_e, self.v_e, self.a_e], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "SkillParams":
        y_e, phi_e, v_e, a_e = (float(c) for c in arr)
        return cls(y_e, phi_e, v_e, a_e)


@dataclass(frozen=True)
class SkillBounds:
    """Admissible ranges of the skill parameters.

    ``v_max`` doubles as the speed cap used for the reachable-distance rule,
    so it should equal the scenario speed limit.
    """

    y_max: float = 4.0
    phi_max: float = 0.5
    v_max: float = 15.0
    a_min: float = -6.0
    a_max: float = 3.0
    kappa_max: float = 0.3

    def __post_init__(self):
        if min(self.y_max, self.phi_max, self.v_max, self.a_max, self.kappa_max) <= 0:
            raise ValueError("skill bounds must be strictly positive (except a_min)")
        if self.a_min >= 0:
            raise ValueError("a_min must be negative")

    @property
    def lower(self) -> np.ndarray:
        return np.array([-self.y_max, -self.phi_max, 0.0, self.a_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.y_max, self.phi_max, self.v_max, self.a_max])

    def clip(self, theta):
        """Project parameter vector(s) onto the box."""
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def contains(self, theta, tol: float = 1e-9) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))


@dataclass
class Path:
    """Cubic ``y(x) = c2 x^2 + c3 x^3`` on ``[0, x_e]`` in the ego frame."""

    c2: float
    c3: float
    x_e: float
    x_table: np.ndarray = field(repr=False)
    s_table: np.ndarray = field(repr=False)

    @property
    def length(self) -> float:
        return float(self.s_table[-1])

    def y(self, x):
        x = np.asarray(x, dtype=float)
        return self.c2 * x**2 + self.c3 * x**3

    def slope(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * self.c2 * x + 3.0 * self.c3 * x**2

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        d1 = self.slope(x)
        d2 = 2.0 * self.c2 + 6.0 * self.c3 * x
        return np.abs(d2) / (1.0 + d1**2) ** 1.5

    def x_at(self, s):
        """Inverse arc-length lookup (linear interpolation in the table)."""
        return np.interp(s, self.s_table, self.x_table)


@dataclass
class SpeedProfile:
    """Cubic ``v(t) = v0 + a0 t + c2 t^2 + c3 t^3`` on ``[0, T_sec]``."""

    v0: float
    a0: float
    c2: float
    c3: float
    T_sec: float

    def speed(self, t, clamp: bool = True):
        t = np.asarray(t, dtype=float)
        v = self.v0 + self.a0 * t + self.c2 * t**2 + self.c3 * t**3
        return np.maximum(v, 0.0) if clamp else v

    def accel(self, t):
        t = np.asarray(t, dtype=float)
        return self.a0 + 2.0 * self.c2 * t + 3.0 * self.c3 * t**2

    def distance(self, t):
        """Integral of the (zero-clamped) speed from 0 to ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        coeffs = np.array([[self.v0, self.a0, self.c2, self.c3]])
        out = _clamped_distance(coeffs, t[None, :], self.T_sec)[0]
        return out if out.size > 1 else float(out[0])


@dataclass
class Trajectory:
    """T states sampled every ``dt`` after ``origin`` (the initiating state).

    ``array`` has shape ``(T, 5)`` with columns ``x, y, phi, v, a``.
    """

    origin: VehicleState
    array: np.ndarray
    dt: float = DEFAULT_DT
    theta: SkillParams | None = None

    def __len__(self) -> int:
        return len(self.array)

    @property
    def states(self) -> list[VehicleState]:
        return [VehicleState.from_array(row) for row in self.array]

    @property
    def final_state(self) -> VehicleState:
        return VehicleState.from_array(self.array[-1])


def max_reach_distance(state: VehicleState, bounds: SkillBounds, T_sec: float) -> float:
    """Distance covered under maximal acceleration capped at ``v_max``.

    Floored at :data:`X_E_FLOOR` so a stopped vehicle still gets a usable path.
    """
    return float(_max_reach(np.asarray(state.v, dtype=float), bounds, T_sec))


def _max_reach(v0, bounds: SkillBounds, T_sec: float):
    v0 = np.asarray(v0, dtype=float)
    vmax, amax = bounds.v_max, bounds.a_max
    # time at which the speed cap is hit (0 when already at or above it)
    t_cap = np.clip((vmax - v0) / amax, 0.0, T_sec)
    dist = np.where(
        v0 >= vmax,
        vmax * T_sec,
        v0 * t_cap + 0.5 * amax * t_cap**2 + vmax * (T_sec - t_cap),
    )
    return np.maximum(dist, X_E_FLOOR)


def _path_coeffs(y_e, phi_e, x_e):
    slope = np.tan(phi_e)
    c2 = (3.0 * y_e - slope * x_e) / x_e**2
    c3 = (slope * x_e - 2.0 * y_e) / x_e**3
    return c2, c3


def _arc_tables(c2, c3, x_e, n_arc: int):
    """Composite Simpson arc-length tables for rows of cubic paths.

    Integrates the excess ``sqrt(1 + y'^2) - 1`` so straight paths come out exact.
    """
    u = np.linspace(0.0, 1.0, n_arc)
    xs = x_e[:, None] * u[None, :]
    xm = 0.5 * (xs[:, 1:] + xs[:, :-1])

    def excess(x):
        d1 = 2.0 * c2[:, None] * x + 3.0 * c3[:, None] * x**2
        sq = d1 * d1
        return sq / (1.0 + np.sqrt(1.0 + sq))

    f = excess(xs)
    h = (x_e / (n_arc - 1))[:, None]
    seg = h / 6.0 * (f[:, :-1] + 4.0 * excess(xm) + f[:, 1:])
    s = xs + np.concatenate([np.zeros((len(x_e), 1)), np.cumsum(seg, axis=1)], axis=1)
    return xs, s


def generate_path(y_e: float, phi_e: float, x_e: float, n_arc: int = N_ARC) -> Path:
    if not x_e > 0:
        raise ValueError(f"path endpoint distance must be positive, got {x_e}")
    c2, c3 = _path_coeffs(np.array([y_e]), np.array([phi_e]), np.array([float(x_e)]))
    xs, s = _arc_tables(c2, c3, np.array([float(x_e)]), n_arc)
    return Path(float(c2[0]), float(c3[0]), float(x_e), xs[0], s[0])


def _speed_coeffs(v0, a0, v_e, a_e, T_sec):
    c2 = (3.0 * (v_e - v0) - (2.0 * a0 + a_e) * T_sec) / T_sec**2
    c3 = (2.0 * (v0 - v_e) + (a0 + a_e) * T_sec) / T_sec**3
    return c2, c3


def generate_speed_profile(v0: float, a0: float, v_e: float, a_e: float, T_sec: float) -> SpeedProfile:
    if v0 < 0:
        raise ValueError("initial speed must be non-negative")
    c2, c3 = _speed_coeffs(v0, a0, v_e, a_e, T_sec)
    return SpeedProfile(float(v0), float(a0), float(c2), float(c3), float(T_sec))


def _poly_integral(coeffs, t):
    v0, a0, c2, c3 = coeffs
    return v0 * t + 0.5 * a0 * t**2 + c2 * t**3 / 3.0 + 0.25 * c3 * t**4


def _clamped_distance(coeffs: np.ndarray, t: np.ndarray, T_sec: float) -> np.ndarray:
    """Integral of ``max(v, 0)`` for rows of cubic speed profiles.

    ``coeffs`` has shape (N, 4) in ascending power order, ``t`` is (N, K) or
    (1, K) with values in ``[0, T_sec]``.
    """
    n = len(coeffs)
    t = np.broadcast_to(t, (n, t.shape[-1]))
    v0, a0, c2, c3 = coeffs.T
    out = _poly_integral((v0[:, None], a0[:, None], c2[:, None], c3[:, None]), t)

    # rows whose profile dips below zero somewhere in the window
    cand = [np.zeros(n), np.full(n, T_sec)]
    disc = c2**2 - 3.0 * c3 * a0
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (1.0, -1.0):
            r = np.where(np.abs(c3) > 1e-14, (-c2 + sign * sq) / (3.0 * c3), -a0 / (2.0 * c2))
            cand.append(np.where(np.isfinite(r) & (disc >= 0), np.clip(r, 0.0, T_sec), 0.0))
    cand = np.stack(cand, axis=1)
    vmin = np.min(v0[:, None] + a0[:, None] * cand + c2[:, None] * cand**2 + c3[:, None] * cand**3, axis=1)

    for i in np.flatnonzero(vmin < 0.0):
        row = coeffs[i]
        roots = np.roots(row[::-1]) if abs(row[3]) > 0 else np.roots(row[2::-1])
        roots = np.sort([r.real for r in roots if abs(r.imag) < 1e-12 and 0.0 < r.real < T_sec])
        knots = np.concatenate([[0.0], roots, [T_sec]])
        total = np.zeros(t.shape[1])
        for lo, hi in zip(knots[:-1], knots[1:]):
            mid = 0.5 * (lo + hi)
            if row[0] + row[1] * mid + row[2] * mid**2 + row[3] * mid**3 <= 0.0:
                continue
            upper = np.clip(t[i], lo, hi)
            total += _poly_integral(row, upper) - _poly_integral(row, lo)
        out[i] = total
    return out


def rollout_batch(
    origins: np.ndarray,
    thetas: np.ndarray,
    bounds: SkillBounds,
    T: int = DEFAULT_T,
    dt: float = DEFAULT_DT,
    n_arc: int = N_ARC,
) -> np.ndarray:
    """Generate skills for N (origin, theta) pairs; returns an (N, T, 5) array.

    ``origins`` is (5,) or (N, 5) in world frame, ``thetas`` is (N, 4).
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = len(thetas)
    origins = np.broadcast_to(np.asarray(origins, dtype=float), (n, 5))
    x0, y0, ph0, v0, a0 = origins.T
    y_e, phi_e, v_e, a_e = thetas.T
    T_sec = T * dt
    t = dt * np.arange(1, T + 1)

    c2v, c3v = _speed_coeffs(v0, a0, v_e, a_e, T_sec)
    coeffs = np.stack([v0, a0, c2v, c3v], axis=1)
    tt = t[None, :]
    speed = v0[:, None] + a0[:, None] * tt + c2v[:, None] * tt**2 + c3v[:, None] * tt**3
    accel = a0[:, None] + 2.0 * c2v[:, None] * tt + 3.0 * c3v[:, None] * tt**2
    dist = _clamped_distance(coeffs, tt, T_sec)

    # cubic overshoot can exceed the max-acceleration envelope; stretch the path
    x_e = np.maximum(_max_reach(v0, bounds, T_sec), dist[:, -1])
    c2p, c3p = _path_coeffs(y_e, phi_e, x_e)
    xs, s = _arc_tables(c2p, c3p, x_e, n_arc)
    if np.any(dist[:, -1] > s[:, -1] + 1e-9):
        raise AssertionError("skill arc length exceeds path length")

    x_loc = np.empty_like(dist)
    for i in range(n):
        x_loc[i] = np.interp(dist[i], s[i], xs[i])
    y_loc = c2p[:, None] * x_loc**2 + c3p[:, None] * x_loc**3
    head_loc = np.arctan(2.0 * c2p[:, None] * x_loc + 3.0 * c3p[:, None] * x_loc**2)

    cos0, sin0 = np.cos(ph0)[:, None], np.sin(ph0)[:, None]
    out = np.empty((n, T, 5))
    out[..., 0] = x0[:, None] + cos0 * x_loc - sin0 * y_loc
    out[..., 1] = y0[:, None] + sin0 * x_loc + cos0 * y_loc
    out[..., 2] = wrap_angle(ph0[:, None] + head_loc)
    out[..., 3] = np.maximum(speed, 0.0)
    out[..., 4] = accel
    return out


def generate_skill(
    state: VehicleState,
    theta: SkillParams,
    bounds: SkillBounds,
    T: int = DEFAULT_T,
    dt: float = DEFAULT_DT,
    n_arc: int = N_ARC,
) -> Trajectory:
    """Generate the T-step trajectory for ``theta`` starting at ``state``.

    Raises:
        ValueError: if ``theta`` lies outside ``bounds`` or the state is invalid.
    """
    if state.v < 0:
        raise ValueError("state speed must be non-negative")
    arr = theta.as_array()
    if not bounds.contains(arr):
        raise ValueError(f"skill parameters {theta} outside bounds")
    traj = rollout_batch(state.as_array(), arr[None, :], bounds, T, dt, n_arc)[0]
    return Trajectory(origin=state, array=traj, dt=dt, theta=theta)


def to_ego_frame(origin: VehicleState, points: np.ndarray) -> np.ndarray:
    """Express world-frame state rows in the frame of ``origin``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
    dx, dy = pts[:, 0] - origin.x, pts[:, 1] - origin.y
    c, s = math.cos(origin.phi), math.sin(origin.phi)
    pts[:, 0] = c * dx + s * dy
    pts[:, 1] = -s * dx + c * dy
    pts[:, 2] = wrap_angle(pts[:, 2] - origin.phi)
    return pts
