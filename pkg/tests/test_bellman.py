import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_mdp.bellman import (
    CalibrationError,
    apply_penalized_operator_q,
    apply_penalized_operator_v,
    calibrate_lambda_for_rho,
    constrained_value_iteration,
    min_value_iteration,
    non_robust_values,
    robust_value_iteration,
)
from robust_mdp.divergence import RobustSpec
from robust_mdp.dro import solve_penalized_exact

from conftest import one_state_mdp, random_mdp


def operator_by_rows(mdp, spec, v):
    """Independent operator: one scalar DRO solve per (s, a)."""
    out = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        out[s] = max(
            mdp.reward[s, a] + mdp.gamma * solve_penalized_exact(spec, mdp.transition[s, a], v, method="golden").value
            for a in range(mdp.n_actions)
        )
    return np.clip(out, 0.0, mdp.v_max)


def test_zero_input_gives_max_reward(rng):
    mdp = random_mdp(rng, 6, 3)
    spec = RobustSpec.penalized(1.0, mdp.gamma)
    np.testing.assert_allclose(apply_penalized_operator_v(mdp, spec, np.zeros(6)), mdp.reward.max(axis=1), atol=1e-12)
    np.testing.assert_allclose(apply_penalized_operator_q(mdp, spec, np.zeros((6, 3))), mdp.reward, atol=1e-12)


def test_operator_matches_rowwise_solves(rng):
    mdp = random_mdp(rng, 5, 2, sparsity=0.4)
    spec = RobustSpec.penalized(0.7, mdp.gamma)
    v = rng.uniform(0, mdp.v_max, 5)
    np.testing.assert_allclose(apply_penalized_operator_v(mdp, spec, v), operator_by_rows(mdp, spec, v), atol=1e-10)


@pytest.mark.parametrize("lam", [0.1, 3.0])
def test_one_state_fixed_point(lam):
    mdp = one_state_mdp()
    res = robust_value_iteration(mdp, RobustSpec.penalized(lam, 0.9), tol=1e-12)
    assert res.v_star[0] == pytest.approx(10.0, abs=1e-10)


@given(st.integers(0, 10**6), st.sampled_from([0.2, 1.0, 10.0]))
def test_contraction_v_and_q(seed, lam):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 6, 2)
    spec = RobustSpec.penalized(lam, mdp.gamma)
    v1, v2 = rng.uniform(0, mdp.v_max, (2, 6))
    lhs = np.max(np.abs(apply_penalized_operator_v(mdp, spec, v1) - apply_penalized_operator_v(mdp, spec, v2)))
    assert lhs <= mdp.gamma * np.max(np.abs(v1 - v2)) + 1e-10
    q1, q2 = rng.uniform(0, mdp.v_max, (2, 6, 2))
    lhs = np.max(np.abs(apply_penalized_operator_q(mdp, spec, q1) - apply_penalized_operator_q(mdp, spec, q2)))
    assert lhs <= mdp.gamma * np.max(np.abs(q1 - q2)) + 1e-10


@given(st.integers(0, 10**6))
def test_q_and_v_operators_commute(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 5, 3)
    spec = RobustSpec.penalized(1.5, mdp.gamma)
    q = rng.uniform(0, mdp.v_max, (5, 3))
    via_q = np.clip(apply_penalized_operator_q(mdp, spec, q).max(axis=1), 0, mdp.v_max)
    via_v = operator_by_rows(mdp, spec, q.max(axis=1))
    np.testing.assert_allclose(via_q, via_v, atol=1e-10)


def test_chain_fixed_point(chain):
    spec = RobustSpec.penalized(1.0, 0.9)
    res = robust_value_iteration(chain, spec, T=10_000, tol=1e-9)
    assert res.converged and res.residual <= 1e-9
    assert res.v_star[-1] == 0.0
    assert np.max(np.abs(apply_penalized_operator_v(chain, spec, res.v_star) - res.v_star)) <= 1e-9
    assert np.all(res.eta_star >= spec.theta_lo) and np.all(res.eta_star <= spec.theta_hi)
    assert np.all(res.v_star <= non_robust_values(chain) + 1e-9)


def test_residuals_decay_geometrically(chain):
    res = robust_value_iteration(chain, RobustSpec.penalized(2.0, 0.9), tol=1e-10)
    trace = np.array(res.residual_trace)
    bound = 0.9 ** np.arange(len(trace)) * trace[0] * (1 + 1e-6)
    assert np.all(trace <= bound + 1e-15)


def test_large_lambda_recovers_nominal(chain):
    res = robust_value_iteration(chain, RobustSpec.penalized(1e6, 0.9), tol=1e-10)
    assert np.max(np.abs(res.v_star - non_robust_values(chain))) <= 1e-2


def test_sga_mode_matches_exact(chain):
    spec = RobustSpec.penalized(1.0, 0.9)
    exact = robust_value_iteration(chain, spec, tol=1e-9)
    sga = robust_value_iteration(chain, spec, mode="sga", T=300, tol=1e-9, inner_steps=1000)
    assert np.max(np.abs(sga.v_star - exact.v_star)) <= 1e-2


def test_nonconvergence_is_flagged(chain):
    res = robust_value_iteration(chain, RobustSpec.penalized(1.0, 0.9), T=5, tol=1e-12)
    assert not res.converged and res.iterations == 5 and res.residual > 1e-12


def test_result_serializes(chain):
    res = robust_value_iteration(chain, RobustSpec.penalized(1.0, 0.9), tol=1e-6)
    data = json.loads(res.to_json())
    assert data["iterations"] == res.iterations and len(data["residual_trace"]) == res.iterations


def test_lambda_to_zero_is_min_bellman(chain):
    v0 = min_value_iteration(chain)
    res = robust_value_iteration(chain, RobustSpec.penalized(1e-6, 0.9), tol=1e-10)
    assert np.max(np.abs(res.v_star - v0)) <= 1e-3


def test_lambda_monotone_values(chain):
    mu = np.full(10, 0.1)
    vals = [mu @ robust_value_iteration(chain, RobustSpec.penalized(lam, 0.9), tol=1e-11).v_star for lam in (0.1, 0.5, 1, 3, 10, 100)]
    assert all(a <= b + 1e-9 for a, b in zip(vals, vals[1:]))


def test_calibration_round_trip(chain):
    cal = calibrate_lambda_for_rho(chain, RobustSpec.penalized(1.0, 0.9), 0.1)
    assert cal.gap <= 1e-4
    res = robust_value_iteration(chain, RobustSpec.penalized(cal.lam, 0.9), tol=1e-10)
    assert abs(res.v_star.mean() - cal.value_constrained) <= 1e-4


def test_calibration_tiny_rho_gives_huge_lambda(chain):
    cal = calibrate_lambda_for_rho(chain, RobustSpec.penalized(1.0, 0.9), 1e-10)
    nominal = non_robust_values(chain).mean()
    assert cal.lam >= 1e3
    assert cal.value_constrained == pytest.approx(nominal, abs=1e-3)
    assert cal.value_penalized == pytest.approx(nominal, abs=1e-3)


def test_calibration_outside_bracket(chain):
    with pytest.raises(CalibrationError, match="achievable range"):
        calibrate_lambda_for_rho(chain, RobustSpec.penalized(1.0, 0.9), 0.1, lam_lo=10.0, lam_hi=100.0)
    with pytest.raises(ValueError):
        calibrate_lambda_for_rho(chain, RobustSpec.penalized(1.0, 0.9), 0.0)


def test_constrained_iteration_below_nominal(chain):
    res = constrained_value_iteration(chain, RobustSpec.constrained(0.1, 0.9), tol=1e-9)
    assert res.converged and res.v_star[-1] == 0.0
    assert np.all(res.v_star <= non_robust_values(chain) + 1e-9)
    assert np.all(res.lambda_star >= 0)
