import numpy as np
import pytest
from hypothesis import settings

from robust_mdp.harness.envs import build_chain10
from robust_mdp.mdp import TabularMdp

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def random_mdp(rng, n_states=8, n_actions=3, gamma=0.9, sparsity=0.0):
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity:
        p = np.where(rng.random(p.shape) < sparsity, 0.0, p)
        p[..., 0] += 1e-3
        p /= p.sum(axis=-1, keepdims=True)
    return TabularMdp(p, rng.random((n_states, n_actions)), gamma)


def one_state_mdp(reward=1.0, gamma=0.9):
    return TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma)


@pytest.fixture
def chain():
    return build_chain10("absorbing", p=0.9)


@pytest.fixture
def recurrent_chain():
    return build_chain10("recurrent", p=0.9, escape=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
