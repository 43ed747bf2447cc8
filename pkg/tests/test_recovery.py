from dataclasses import dataclass, replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asaprl.recovery import (
    RecoveryConfig,
    annotate_demonstrations,
    objective_residual,
    recover,
    recovery_report,
    segment_demonstration,
)
from asaprl.skills import SkillBounds, SkillParams, VehicleState, generate_skill, rollout_batch

from conftest import CLEAN_TOL, random_state, random_theta

B = SkillBounds()


@dataclass
class Demo:
    states: np.ndarray


def skill_chain(rng, n_skills, T=10):
    """States of consecutive random skills, starting state included."""
    s = random_state(rng)
    rows = [s.as_array()]
    for _ in range(n_skills):
        traj = generate_skill(s, SkillParams(*random_theta(rng)), B, T)
        rows.extend(traj.array)
        s = traj.final_state
    return np.array(rows)


def test_roundtrip_random_skills():
    rng = np.random.default_rng(11)
    ok, equivalent = 0, 0
    for _ in range(200):
        s, th = random_state(rng), random_theta(rng)
        res = recover(generate_skill(s, SkillParams(*th), B), s, B)
        err = np.abs(res.theta_hat.as_array() - th)
        if np.all(err <= CLEAN_TOL) and res.residual <= 1e-3:
            ok += 1
        elif res.residual <= 1e-3:
            equivalent += 1
    assert ok >= 198
    assert ok + equivalent == 200


def test_straight_segment_recovers_identity():
    s = VehicleState(3.0, -2.0, 0.0, 9.0, 0.0)
    X = np.array([[3.0 + 9.0 * 0.1 * k, -2.0, 0.0, 9.0, 0.0] for k in range(1, 11)])
    res = recover(X, s, B)
    assert np.all(np.abs(res.theta_hat.as_array() - [0, 0, 9.0, 0]) <= CLEAN_TOL)


def _noisy_trials(n=100, sigma=0.05, seed=7):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s, th = random_state(rng), random_theta(rng)
        X = generate_skill(s, SkillParams(*th), B).array.copy()
        X[:, :2] += rng.normal(0.0, sigma, (10, 2))
        out.append((th, recover(X, s, B)))
    return out


def test_noisy_recovery_residual_bound():
    sigma = 0.05
    bound = 3 * sigma * np.sqrt(2 * 10)
    assert max(r.residual for _, r in _noisy_trials(sigma=sigma)) <= bound


def test_noisy_recovery_parameter_bound():
    errs = np.array([np.abs(r.theta_hat.as_array() - th) / CLEAN_TOL for th, r in _noisy_trials()])
    assert np.all(errs <= 5.0), f"{np.mean(np.all(errs <= 5.0, axis=1)):.2f} within 5x; worst ratio {errs.max(axis=0)}"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reported_residual_is_consistent_and_in_bounds(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    X = generate_skill(s, SkillParams(*random_theta(rng)), B).array + rng.normal(0, 0.1, (10, 5))
    res = recover(X, s, B)
    assert res.residual >= 0
    assert B.contains(res.theta_hat.as_array(), tol=0.0)
    regen = rollout_batch(s.as_array(), res.theta_hat.as_array()[None], B)[0]
    assert abs(objective_residual(X, regen, RecoveryConfig().weights) - res.residual) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_more_starts_never_worse(seed):
    rng = np.random.default_rng(seed)
    s = random_state(rng)
    X = generate_skill(s, SkillParams(*random_theta(rng)), B).array + rng.normal(0, 0.2, (10, 5))
    resid = [recover(X, s, B, RecoveryConfig(n_starts=n)).residual for n in (1, 2, 4, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(resid, resid[1:]))


def test_recover_rejects_wrong_length():
    with pytest.raises(ValueError):
        recover(np.zeros((9, 5)), VehicleState(0, 0, 0, 1, 0), B)


def test_config_validation():
    with pytest.raises(ValueError):
        RecoveryConfig(n_starts=0)
    with pytest.raises(ValueError):
        RecoveryConfig(weights=(1, -1, 1, 1))


# --------------------------------------------------------------- segmenting
def test_segment_counts():
    states = np.arange(31 * 5, dtype=float).reshape(31, 5)
    segs = segment_demonstration(states, 10)
    assert len(segs) == 3
    assert segs[-1][1][-1].tolist() == states[30].tolist()
    assert segment_demonstration(states[:10], 10) == []
    assert len(segment_demonstration(states[:11], 10)) == 1


def test_segment_start_is_previous_final():
    states = np.random.default_rng(0).normal(size=(21, 5))
    segs = segment_demonstration(states, 10)
    assert segs[1][0].as_array().tolist() == segs[0][1][-1].tolist()
    assert segs[0][0].as_array().tolist() == states[0].tolist()


@given(st.integers(0, 80), st.integers(1, 12))
def test_segment_count_formula(n, T):
    segs = segment_demonstration(np.zeros((n, 5)), T)
    assert len(segs) == (max(n - 1, 0) // T)
    assert all(x.shape == (T, 5) for _, x in segs)


# ---------------------------------------------------------------- datasets
def test_annotate_counts_and_empty():
    rng = np.random.default_rng(5)
    demos = [Demo(skill_chain(rng, 10)) for _ in range(10)]
    assert all(len(d.states) == 101 for d in demos)
    records = annotate_demonstrations(demos, B)
    assert len(records) == 100
    assert annotate_demonstrations([], B) == []


def test_annotate_oracle_data_converges():
    rng = np.random.default_rng(6)
    demos = [Demo(skill_chain(rng, 20)) for _ in range(10)]
    records = annotate_demonstrations(demos, B)
    report = recovery_report(records)
    assert report["convergence_rate"] >= 0.99
    assert sum(h["count"] for h in report["histogram"]) == len(records)


def test_flagging_retains_records():
    rng = np.random.default_rng(8)
    states = skill_chain(rng, 5)
    noisy = states.copy()
    noisy[1:, :2] += rng.normal(0, 1.5, (len(states) - 1, 2))
    records = annotate_demonstrations([Demo(noisy)], B, replace(RecoveryConfig(), residual_cutoff=0.5))
    assert len(records) == 5
    assert any(r.flagged for r in records)
    assert all(r.flagged == (r.residual > 0.5) for r in records)
