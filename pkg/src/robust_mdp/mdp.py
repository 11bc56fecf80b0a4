"""Finite MDP container, classical planning and policy helpers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_TOL = 1e-12
# Largest row-sum defect that is silently renormalized on ingestion.
INGEST_TOL = 1e-6
TIE_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Iterative solver stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _as_stochastic(rows: np.ndarray, name: str) -> np.ndarray:
    rows = np.array(rows, dtype=float)
    if np.any(~np.isfinite(rows)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(rows < -ROW_TOL):
        raise ValueError(f"{name} has negative entries")
    rows = np.clip(rows, 0.0, None)
    sums = rows.sum(axis=-1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > INGEST_TOL):
        bad = np.argwhere(np.abs(sums[..., 0] - 1.0) > INGEST_TOL)[0]
        raise ValueError(f"{name} row {tuple(int(i) for i in bad)} sums to {float(sums[tuple(bad)][0])}")
    return rows / sums


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP.

    ``transition[s, a, s']`` is P*(s'|s,a), ``reward[s, a]`` lies in [0, 1].
    Rows are renormalized on construction so they sum to one within 1e-12.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        p = _as_stochastic(self.transition, "transition")
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        r = np.array(self.reward, dtype=float)
        if r.shape != p.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match transition {p.shape}")
        if np.any(r < 0.0) or np.any(r > 1.0):
            raise ValueError("reward entries must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        mdp = cls(np.asarray(data["transition"]), np.asarray(data["reward"]), float(data["gamma"]))
        if (mdp.n_states, mdp.n_actions) != (int(data["n_states"]), int(data["n_actions"])):
            raise ValueError("declared n_states/n_actions disagree with array shapes")
        return mdp


def load_mdp(path) -> TabularMdp:
    with open(path) as fh:
        return TabularMdp.from_dict(json.load(fh))


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=2))


def check_policy(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match mdp")
    if np.any(pi < 0.0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL):
        raise ValueError("policy rows must be probability vectors")
    return pi


def bellman_optimality(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """Classical operator (TV)(s) = max_a R(s,a) + gamma * P(.|s,a) @ V."""
    return (mdp.reward + mdp.gamma * mdp.transition @ v).max(axis=1)


def standard_value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 100_000):
    """Run value iteration until ``||TV - V||_inf <= tol``.

    Returns:
        (v, iterations): the value vector and the number of sweeps performed.

    Raises:
        ConvergenceError: if ``max_iter`` sweeps do not reach ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        tv = bellman_optimality(mdp, v)
        residual = float(np.max(np.abs(tv - v)))
        if residual <= tol:
            return v, it
        v = tv
    raise ConvergenceError("value iteration did not converge", residual, max_iter)


def greedy_policy(mdp: TabularMdp, q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Deterministic greedy policy; near-ties go to the smallest action index."""
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"q shape {q.shape} does not match mdp")
    best = q.max(axis=1, keepdims=True)
    near = q >= best - tie_tol * np.maximum(1.0, np.abs(best))
    actions = np.argmax(near, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(mdp.n_states), actions] = 1.0
    return pi


def policy_matrices(mdp: TabularMdp, pi: np.ndarray):
    """Return (P^pi, R^pi) for the state chain induced by ``pi``."""
    pi = check_policy(mdp, pi)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.sum(pi * mdp.reward, axis=1)
    return p_pi, r_pi


def evaluate_policy(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """Exact V^pi from the linear system (I - gamma P^pi) V = R^pi."""
    p_pi, r_pi = policy_matrices(mdp, pi)
    a = np.eye(mdp.n_states) - mdp.gamma * p_pi
    v = np.linalg.solve(a, r_pi)
    residual = np.max(np.abs(a @ v - r_pi))
    if residual > 1e-10:
        raise RuntimeError(f"policy evaluation residual {residual:.3e} too large")
    return v


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
