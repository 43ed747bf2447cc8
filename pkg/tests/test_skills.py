import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from asaprl.skills import (
    N_ARC,
    X_E_FLOOR,
    SkillBounds,
    SkillParams,
    VehicleState,
    generate_path,
    generate_skill,
    generate_speed_profile,
    max_reach_distance,
    rollout_batch,
)

B = SkillBounds()


def thetas(bounds=B):
    return st.tuples(
        st.floats(-bounds.y_max, bounds.y_max),
        st.floats(-bounds.phi_max, bounds.phi_max),
        st.floats(0.0, bounds.v_max),
        st.floats(bounds.a_min, bounds.a_max),
    )


states = st.builds(
    VehicleState,
    st.floats(-100, 100),
    st.floats(-100, 100),
    st.floats(-3.0, 3.0),
    st.floats(0.0, B.v_max),
    st.floats(B.a_min, B.a_max),
)


# ------------------------------------------------------------ reach distance
def reach_oracle(v0, a_max, v_max, T_sec):
    val, _ = integrate.quad(lambda t: min(v_max, v0 + a_max * t), 0.0, T_sec, points=[(v_max - v0) / a_max], limit=200)
    return max(val, X_E_FLOOR)


def test_reach_at_cap():
    s = VehicleState(0, 0, 0, B.v_max, 0)
    assert max_reach_distance(s, B, 1.0) == pytest.approx(B.v_max * 1.0, abs=1e-12)


def test_reach_from_standstill_hits_floor():
    b = SkillBounds(a_max=2.0, v_max=10.0)
    got = max_reach_distance(VehicleState(0, 0, 0, 0.0, 0), b, 1.0)
    assert got == pytest.approx(max(1.0, X_E_FLOOR), abs=1e-12)
    assert got == pytest.approx(reach_oracle(0.0, 2.0, 10.0, 1.0), abs=1e-9)


def test_reach_piecewise_cap():
    b = SkillBounds(a_max=2.0, v_max=10.0)
    got = max_reach_distance(VehicleState(0, 0, 0, 8.0, 0), b, 2.0)
    assert got == pytest.approx(19.0, abs=1e-12)
    assert got == pytest.approx(reach_oracle(8.0, 2.0, 10.0, 2.0), abs=1e-9)


@given(st.floats(0.0, 15.0), st.floats(0.2, 3.0))
def test_reach_matches_quadrature(v0, T_sec):
    assert max_reach_distance(VehicleState(0, 0, 0, v0, 0), B, T_sec) == pytest.approx(
        reach_oracle(v0, B.a_max, B.v_max, T_sec), rel=1e-9, abs=1e-9)


# --------------------------------------------------------------------- path
def test_straight_path_length_exact():
    p = generate_path(0.0, 0.0, 20.0)
    assert p.length == 20.0
    assert np.all(p.y(np.linspace(0, 20, 11)) == 0.0)


def test_path_midpoint_symmetry():
    p = generate_path(3.5, 0.0, 30.0)
    assert p.y(15.0) == pytest.approx(1.75, abs=1e-12)


def test_path_arc_length_matches_quadrature():
    p = generate_path(2.0, 0.1, 25.0)
    oracle, _ = integrate.quad(lambda x: math.sqrt(1.0 + float(p.slope(x)) ** 2), 0.0, 25.0, epsabs=1e-13, epsrel=1e-13)
    assert abs(p.length - oracle) / oracle <= 1e-6


def test_path_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        generate_path(1.0, 0.0, 0.0)


@given(st.floats(-4, 4), st.floats(-0.5, 0.5), st.floats(0.5, 40))
def test_path_boundary_conditions(y_e, phi_e, x_e):
    p = generate_path(y_e, phi_e, x_e)
    assert abs(p.y(0.0)) <= 1e-12 and abs(p.slope(0.0)) <= 1e-12
    assert p.y(x_e) == pytest.approx(y_e, abs=1e-9)
    assert p.slope(x_e) == pytest.approx(math.tan(phi_e), abs=1e-9)
    assert np.all(np.diff(p.s_table) > 0)


# ------------------------------------------------------------ speed profile
def test_constant_profile():
    prof = generate_speed_profile(5, 0, 5, 0, 1)
    assert np.allclose(prof.speed(np.linspace(0, 1, 11)), 5.0, atol=1e-12)
    assert prof.distance(1.0) == pytest.approx(5.0, abs=1e-12)


def test_profile_midpoint_and_distance():
    prof = generate_speed_profile(0, 0, 10, 0, 1)
    assert prof.speed(0.5) == pytest.approx(5.0, abs=1e-12)
    assert prof.distance(1.0) == pytest.approx(5.0, abs=1e-12)


@given(st.floats(0, 15), st.floats(-6, 3), st.floats(0, 15), st.floats(-6, 3), st.floats(0.1, 3.0))
def test_profile_boundary_exactness(v0, a0, v_e, a_e, T_sec):
    prof = generate_speed_profile(v0, a0, v_e, a_e, T_sec)
    assert abs(prof.speed(0.0, clamp=False) - v0) <= 1e-9
    assert abs(prof.accel(0.0) - a0) <= 1e-9
    assert abs(prof.speed(T_sec, clamp=False) - v_e) <= 1e-9
    assert abs(prof.accel(T_sec) - a_e) <= 1e-9


@given(st.floats(0, 15), st.floats(-6, 3), st.floats(0, 15), st.floats(-6, 3))
def test_clamped_distance_matches_quadrature_and_is_monotone(v0, a0, v_e, a_e):
    prof = generate_speed_profile(v0, a0, v_e, a_e, 1.0)
    ts = np.linspace(0, 1, 21)
    d = prof.distance(ts)
    assert np.all(np.diff(d) >= -1e-12)
    oracle, _ = integrate.quad(lambda t: float(prof.speed(t)), 0, 1, limit=200, epsabs=1e-12)
    assert d[-1] == pytest.approx(oracle, abs=1e-8)


# -------------------------------------------------------------------- skills
def test_straight_constant_speed_skill():
    v0 = 8.0
    traj = generate_skill(VehicleState(0, 0, 0, v0, 0), SkillParams(0, 0, v0, 0), B)
    k = np.arange(1, 11)
    assert np.allclose(traj.array[:, 0], v0 * k * 0.1, atol=1e-9)
    assert np.allclose(traj.array[:, 1], 0.0, atol=1e-12)
    assert np.allclose(traj.array[:, 2], 0.0, atol=1e-12)
    assert len(traj) == 10


def reference_skill(state: VehicleState, theta, bounds, T, dt, sub=100):
    """Independent reference: speed integrated with fine Simpson steps, arc length by quadrature root-finding."""
    T_sec = T * dt
    prof = generate_speed_profile(state.v, state.a, theta[2], theta[3], T_sec)
    fine = np.linspace(0.0, T_sec, T * sub + 1)
    v = np.maximum(prof.speed(fine, clamp=False), 0.0)
    dist = integrate.cumulative_simpson(v, x=fine, initial=0.0)
    x_e = max(max_reach_distance(state, bounds, T_sec), dist[-1])
    path = generate_path(theta[0], theta[1], x_e)

    def arc(x):
        return integrate.quad(lambda u: math.sqrt(1.0 + float(path.slope(u)) ** 2), 0.0, x, epsabs=1e-12)[0]

    out = []
    for k in range(1, T + 1):
        s_k = dist[k * sub]
        xk = 0.0 if s_k <= 0 else optimize.brentq(lambda x: arc(x) - s_k, 0.0, x_e + 1e-9, xtol=1e-12)
        yk = float(path.y(xk))
        c, s = math.cos(state.phi), math.sin(state.phi)
        out.append((state.x + c * xk - s * yk, state.y + s * xk + c * yk))
    return np.array(out)


def test_lane_change_skill_matches_reference():
    start = VehicleState(0, 0, 0, 10.0, 0)
    traj = generate_skill(start, SkillParams(3.5, 0.0, 10.0, 0.0), B, T=10, dt=0.1)
    ref = reference_skill(start, (3.5, 0.0, 10.0, 0.0), B, 10, 0.1)
    assert np.max(np.abs(traj.array[:, :2] - ref)) <= 1e-4
    assert 0.0 < traj.array[-1, 1] < 3.5


@settings(max_examples=25, deadline=None)
@given(states, thetas())
def test_random_skills_match_reference(state, theta):
    traj = generate_skill(state, SkillParams(*theta), B)
    ref = reference_skill(state, theta, B, 10, 0.1)
    assert np.max(np.abs(traj.array[:, :2] - ref)) <= 1e-4


def test_consecutive_skills_are_continuous():
    a = generate_skill(VehicleState(0, 0, 0.1, 7.0, 0.5), SkillParams(1.0, 0.1, 9.0, -0.5), B)
    b = generate_skill(a.final_state, SkillParams(-1.0, 0.0, 6.0, 0.0), B)
    assert b.origin == a.final_state
    step = np.hypot(*(b.array[0, :2] - a.array[-1, :2]))
    assert step <= a.final_state.v * 0.1 + 0.5 * 3.0 * 0.01 + 1e-9
    assert abs(b.array[0, 3] - max(a.final_state.v + a.final_state.a * 0.1, 0.0)) <= 0.1


@given(states, thetas())
def test_skill_boundary_conditions(state, theta):
    traj = generate_skill(state, SkillParams(*theta), B)
    assert traj.array.shape == (10, 5)
    assert abs(traj.array[-1, 3] - max(theta[2], 0.0)) <= 1e-9
    assert abs(traj.array[-1, 4] - theta[3]) <= 1e-9


def test_generate_skill_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        generate_skill(VehicleState(0, 0, 0, 5, 0), SkillParams(5.0, 0, 5, 0), B)
    with pytest.raises(ValueError):
        generate_skill(VehicleState(0, 0, 0, -1, 0), SkillParams(0, 0, 5, 0), B)


def test_resolution_convergence():
    rng = np.random.default_rng(1)
    th = rng.uniform(B.lower, B.upper, (500, 4))
    origins = np.column_stack([np.zeros(500), np.zeros(500), rng.uniform(-3, 3, 500),
                               rng.uniform(0, B.v_max, 500), rng.uniform(B.a_min, B.a_max, 500)])
    base = np.stack([rollout_batch(o, t[None], B)[0] for o, t in zip(origins, th)])
    fine = np.stack([rollout_batch(o, t[None], B, n_arc=4 * N_ARC)[0] for o, t in zip(origins, th)])
    assert np.max(np.hypot(*(base[..., :2] - fine[..., :2]).transpose(2, 0, 1))) <= 1e-4


def test_coverage_never_violated():
    rng = np.random.default_rng(2)
    th = rng.uniform(B.lower, B.upper, (10_000, 4))
    origins = np.column_stack([np.zeros(10_000), np.zeros(10_000), np.zeros(10_000),
                               rng.uniform(0, B.v_max, 10_000), rng.uniform(B.a_min, B.a_max, 10_000)])
    out = rollout_batch(origins, th, B)  # raises if the arc length runs past the path
    assert np.all(np.isfinite(out))


def test_curvature_within_limit():
    # Path curvature over random in-bounds parameters and start speeds, 200 points per path.
    rng = np.random.default_rng(3)
    th = rng.uniform(B.lower, B.upper, (10_000, 4))
    v0 = rng.uniform(0, B.v_max, 10_000)
    worst = 0.0
    for (y_e, phi_e, _, _), v in zip(th, v0):
        x_e = max_reach_distance(VehicleState(0, 0, 0, v, 0), B, 1.0)
        p = generate_path(y_e, phi_e, x_e)
        worst = max(worst, float(np.max(np.abs(p.curvature(np.linspace(0, x_e, 200))))))
    assert worst <= B.kappa_max
