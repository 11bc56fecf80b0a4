"""Environment builders for the chain experiments."""

from __future__ import annotations

import numpy as np

from ..mdp import TabularMdp, load_mdp

N_CHAIN = 10


def build_chain10(variant: str = "absorbing", p: float = 0.9, escape: float = 0.1, gamma: float = 0.9) -> TabularMdp:
    """Ten-state, two-action chain.

    For states 1..9, action 1 stays with probability ``p`` and advances with
    ``1 - p``; action 2 swaps the two. Rewards are 1 except at the last state,
    which pays 0. In the ``absorbing`` variant the last state self-loops; in
    the ``recurrent`` variant it returns to the first state with probability
    ``escape``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if variant not in ("absorbing", "recurrent"):
        raise ValueError(f"unknown chain variant {variant!r}")
    if variant == "recurrent" and not 0.0 < escape < 1.0:
        raise ValueError(f"escape must lie in (0, 1), got {escape}")
    n = N_CHAIN
    P = np.zeros((n, 2, n))
    for i in range(n - 1):
        P[i, 0, i], P[i, 0, i + 1] = p, 1.0 - p
        P[i, 1, i], P[i, 1, i + 1] = 1.0 - p, p
    if variant == "absorbing":
        P[n - 1, :, n - 1] = 1.0
    else:
        P[n - 1, :, 0] = escape
        P[n - 1, :, n - 1] = 1.0 - escape
    R = np.ones((n, 2))
    R[n - 1] = 0.0
    return TabularMdp(P, R, gamma)


def behavior_policy(pi: float, n_states: int = N_CHAIN) -> np.ndarray:
    """pi(1|s) = pi and pi(2|s) = 1 - pi in every state."""
    if not 0.0 <= pi <= 1.0:
        raise ValueError("behavior probability must lie in [0, 1]")
    return np.tile([pi, 1.0 - pi], (n_states, 1))


def build_environment(tag: str, p: float = 0.9, escape: float = 0.1, path=None) -> TabularMdp:
    if tag == "chain10_absorbing":
        return build_chain10("absorbing", p)
    if tag == "chain10_recurrent":
        return build_chain10("recurrent", p, escape)
    if tag == "custom":
        if path is None:
            raise ValueError("custom environment needs an MDP file path")
        return load_mdp(path)
    raise ValueError(f"unknown environment {tag!r}")
