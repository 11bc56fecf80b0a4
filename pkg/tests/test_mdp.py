import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_mdp.mdp import (
    ConvergenceError,
    TabularMdp,
    bellman_optimality,
    evaluate_policy,
    greedy_policy,
    load_mdp,
    save_mdp,
    standard_value_iteration,
    uniform_policy,
)

from conftest import one_state_mdp, random_mdp


def policy_iteration_oracle(mdp):
    """Independent planner: policy iteration with explicit linear solves."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    actions = np.zeros(n_s, dtype=int)
    for _ in range(1000):
        p_pi = mdp.transition[np.arange(n_s), actions]
        r_pi = mdp.reward[np.arange(n_s), actions]
        v = np.linalg.solve(np.eye(n_s) - mdp.gamma * p_pi, r_pi)
        q = mdp.reward + mdp.gamma * mdp.transition @ v
        improved = np.where(q.max(axis=1) > q[np.arange(n_s), actions] + 1e-12, q.argmax(axis=1), actions)
        if np.array_equal(improved, actions):
            return v
        actions = improved
    raise AssertionError("policy iteration oracle did not stabilize")


def test_one_state_value_is_closed_form():
    v, _ = standard_value_iteration(one_state_mdp(), tol=1e-12)
    assert v[0] == pytest.approx(10.0, abs=1e-10)


def test_chain_last_state_is_zero(chain):
    v, _ = standard_value_iteration(chain, tol=1e-10)
    assert v[-1] == 0.0


def test_chain_values_match_policy_iteration(chain):
    v, iters = standard_value_iteration(chain, tol=1e-10)
    assert iters > 1
    np.testing.assert_allclose(v, policy_iteration_oracle(chain), atol=1e-8)
    assert np.max(np.abs(bellman_optimality(chain, v) - v)) <= 1e-10


def test_value_iteration_reports_nonconvergence(chain):
    with pytest.raises(ConvergenceError) as info:
        standard_value_iteration(chain, tol=1e-12, max_iter=3)
    assert info.value.iterations == 3 and info.value.residual > 1e-12


def test_rejects_bad_rows_and_rewards():
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[0.5, 0.4]], [[1.0, 0.0]]]), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        TabularMdp(np.array([[[1.2, -0.2]], [[1.0, 0.0]]]), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), 1.5), 0.9)
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 1.0)


def test_rounding_is_renormalized():
    mdp = TabularMdp(np.array([[[0.3333333, 0.6666666]], [[0.0, 1.0]]]), np.zeros((2, 1)), 0.5)
    assert np.all(np.abs(mdp.transition.sum(axis=-1) - 1.0) <= 1e-12)


def test_greedy_policy_ties(chain):
    q = np.zeros((chain.n_states, chain.n_actions))
    assert np.all(greedy_policy(chain, q)[:, 0] == 1.0)
    q[:, 1] = 1.0
    assert np.all(greedy_policy(chain, q)[:, 1] == 1.0)
    q = np.zeros_like(q)
    q[0] = [1.0, 1.0 + 1e-15]
    assert greedy_policy(chain, q)[0, 0] == 1.0


def test_evaluate_policy_examples(chain):
    assert evaluate_policy(one_state_mdp(gamma=0.5), np.ones((1, 1)))[0] == pytest.approx(2.0)
    zero = TabularMdp(chain.transition, np.zeros_like(chain.reward), chain.gamma)
    assert np.all(evaluate_policy(zero, uniform_policy(zero)) == 0.0)


def test_uniform_policy_value_matches_iterated_expectation(chain):
    pi = uniform_policy(chain)
    p_pi = np.einsum("sa,sat->st", pi, chain.transition)
    r_pi = (pi * chain.reward).sum(axis=1)
    v = np.zeros(chain.n_states)
    for _ in range(10_000):
        v = r_pi + chain.gamma * p_pi @ v
    np.testing.assert_allclose(evaluate_policy(chain, pi), v, atol=1e-10)


@given(st.integers(0, 10_000))
def test_bellman_monotone_and_policy_values_in_range(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n_states=5, n_actions=2)
    v1 = rng.uniform(0, mdp.v_max, mdp.n_states)
    v2 = v1 + rng.uniform(0, 1, mdp.n_states)
    assert np.all(bellman_optimality(mdp, v1) <= bellman_optimality(mdp, v2) + 1e-12)
    pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    v = evaluate_policy(mdp, pi)
    assert np.all(v >= -1e-12) and np.all(v <= mdp.v_max + 1e-9)


def test_json_round_trip(tmp_path, chain):
    path = tmp_path / "chain.json"
    save_mdp(chain, path)
    data = json.loads(path.read_text())
    assert set(data) == {"n_states", "n_actions", "gamma", "reward", "transition"}
    loaded = load_mdp(path)
    np.testing.assert_array_equal(loaded.transition, chain.transition)
    data["n_states"] = 3
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        load_mdp(path)
