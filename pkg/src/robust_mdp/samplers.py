"""Sample sources: a keyed generative model, a single-trajectory simulator and
stationary-distribution diagnostics for the behavior chain."""

from __future__ import annotations

import bisect
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .mdp import TabularMdp, check_policy

# Sub-key streams. Each (stream, t) pair seeds an independent Philox generator.
INNER = 0
OUTER = 1
REWARD = 2
ESTIMATE = 3
TRAJECTORY = 4

_CHUNK_ROWS = 20_000
TV_HORIZON = 200
TV_FLOOR = 1e-13
STATIONARY_TOL = 1e-10


class ChainError(ValueError):
    """The behavior chain lacks a unique, fully supported stationary distribution."""


def _keyed_generator(seed: int, stream: int, t: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(t)))
    return np.random.Generator(np.random.Philox(ss))


def _cdf_table(rows: np.ndarray) -> np.ndarray:
    """Cumulative rows whose entries are exactly 1 from the last positive state on.

    With u in [0, 1), ``count(cdf <= u)`` then never lands on a zero-probability state.
    """
    cdf = np.cumsum(rows, axis=-1)
    n = rows.shape[-1]
    last = n - 1 - np.argmax(rows[..., ::-1] > 0, axis=-1)
    cdf[np.arange(n) >= last[..., None]] = 1.0
    return cdf


@dataclass
class GenerativeModel:
    """Oracle returning next states for any queried (s, a).

    Draws are generated in blocks of shape (n, S, A) from a generator keyed
    by (seed, stream, t). Entry (k, s, a) of a block depends only on the key
    and its flat position, so a block of size n is a prefix of any larger
    block with the same key.

    ``reward_noise`` adds symmetric uniform noise to R, shrunk per cell so the
    noisy reward stays in [0, 1] with the same mean.
    """

    mdp: TabularMdp
    seed: int
    reward_noise: float = 0.0
    draws: int = field(default=0, init=False)

    def __post_init__(self):
        if self.reward_noise < 0:
            raise ValueError("reward_noise must be non-negative")
        self._cdf = _cdf_table(self.mdp.transition)

    def _uniform_to_state(self, u: np.ndarray) -> np.ndarray:
        # u has shape (n, S, A); compare against each cell's cdf
        return np.sum(u[..., None] >= self._cdf[None], axis=-1)

    def next_states(self, stream: int, t: int, n: int) -> np.ndarray:
        """Block of n next-state draws per cell, shape (n, S, A)."""
        if n < 0:
            raise ValueError("n must be non-negative")
        n_s, n_a = self.mdp.n_states, self.mdp.n_actions
        gen = _keyed_generator(self.seed, stream, t)
        out = np.empty((n, n_s, n_a), dtype=np.int64)
        for start in range(0, n, _CHUNK_ROWS):
            stop = min(n, start + _CHUNK_ROWS)
            out[start:stop] = self._uniform_to_state(gen.random((stop - start, n_s, n_a)))
        self.draws += n * n_s * n_a
        return out

    def draw_next_state(self, s: int, a: int, t: int = 0, index: int = 0, stream: int = INNER) -> int:
        """Single replayable draw; equals ``next_states(stream, t, index + 1)[index, s, a]``."""
        n_s, n_a = self.mdp.n_states, self.mdp.n_actions
        if not (0 <= s < n_s and 0 <= a < n_a):
            raise IndexError(f"invalid cell ({s}, {a})")
        gen = _keyed_generator(self.seed, stream, t)
        flat = index * n_s * n_a + s * n_a + a
        u = gen.random(flat + 1)[flat]
        self.draws += 1
        return int(np.sum(u >= self._cdf[s, a]))

    def rewards(self, t: int) -> np.ndarray:
        """Reward observation r_t(s, a) for every cell."""
        r = np.asarray(self.mdp.reward)
        if self.reward_noise == 0.0:
            return r.copy()
        width = np.minimum(self.reward_noise, np.minimum(r, 1.0 - r))
        u = _keyed_generator(self.seed, REWARD, t).random(r.shape)
        return r + width * (2.0 * u - 1.0)


def estimate_empirical_model(gm: GenerativeModel, n: int, t: int = 0) -> TabularMdp:
    """Plug-in MDP from n i.i.d. next-state draws per (s, a)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mdp = gm.mdp
    n_s, n_a = mdp.n_states, mdp.n_actions
    counts = np.zeros((n_s, n_a, n_s))
    gen = _keyed_generator(gm.seed, ESTIMATE, t)
    cells = np.arange(n_s * n_a)
    for start in range(0, n, _CHUNK_ROWS):
        rows = min(n, start + _CHUNK_ROWS) - start
        idx = gm._uniform_to_state(gen.random((rows, n_s, n_a))).reshape(rows, -1)
        flat = (cells[None, :] * n_s + idx).ravel()
        counts += np.bincount(flat, minlength=n_s * n_a * n_s).reshape(n_s, n_a, n_s)
    gm.draws += n * n_s * n_a
    return TabularMdp(counts / n, mdp.reward, mdp.gamma)


def state_action_kernel(mdp: TabularMdp, behavior: np.ndarray) -> np.ndarray:
    """K[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')."""
    pi = check_policy(mdp, behavior)
    n = mdp.n_states * mdp.n_actions
    return (mdp.transition[:, :, :, None] * pi[None, None, :, :]).reshape(n, n)


def _closed_classes(kernel: np.ndarray):
    n_comp, labels = connected_components(csr_matrix(kernel > 0), directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        if not np.any(kernel[np.ix_(members, ~members)] > 0):
            closed.append(np.flatnonzero(members))
    return n_comp, labels, closed


@dataclass(frozen=True)
class ChainDiagnostics:
    """Stationary behavior of the (s, a) chain plus its empirical mixing profile.

    ``tv_decay`` lists (t, sup_x TV(K^t(x, .), d)) for t = 1..200 and
    (mix_m, mix_rho) is the least-squares fit of log sup-TV ~ log M + t log rho.
    """

    d_pi: np.ndarray
    d_min: float
    d_max: float
    tv_decay: tuple
    mix_m: float
    mix_rho: float
    residual: float

    def to_dict(self) -> dict:
        return {
            "d_pi": self.d_pi.tolist(),
            "d_min": self.d_min,
            "d_max": self.d_max,
            "mix_m": self.mix_m,
            "mix_rho": self.mix_rho,
            "residual": self.residual,
            "tv_decay": [list(p) for p in self.tv_decay],
        }


def _cell_name(mdp: TabularMdp, i: int) -> str:
    return f"(s={i // mdp.n_actions}, a={i % mdp.n_actions})"


def stationary_distribution(mdp: TabularMdp, behavior: np.ndarray, horizon: int = TV_HORIZON) -> ChainDiagnostics:
    """Unique stationary distribution of the behavior chain on S x A.

    Raises:
        ChainError: if the chain has several closed classes or any transient
            cell (so some d(s, a) would be zero).
    """
    kernel = state_action_kernel(mdp, behavior)
    n = kernel.shape[0]
    n_comp, labels, closed = _closed_classes(kernel)
    if len(closed) > 1:
        names = ["{" + ", ".join(_cell_name(mdp, i) for i in c) + "}" for c in closed]
        raise ChainError(f"behavior chain has {len(closed)} recurrent classes: " + "; ".join(names))
    if n_comp > 1:
        transient = np.flatnonzero(labels != labels[closed[0][0]])
        raise ChainError(
            "behavior chain is reducible: cells "
            + ", ".join(_cell_name(mdp, i) for i in transient)
            + " are transient and get zero stationary mass; recurrent class is {"
            + ", ".join(_cell_name(mdp, i) for i in closed[0])
            + "}"
        )
    a = kernel.T - np.eye(n)
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    d = np.linalg.solve(a, b)
    residual = float(np.sum(np.abs(d @ kernel - d)))
    if residual > STATIONARY_TOL or abs(d.sum() - 1.0) > STATIONARY_TOL:
        raise ChainError(f"stationary solve residual {residual:.3e} exceeds {STATIONARY_TOL}")
    d = np.clip(d, 0.0, None)
    d /= d.sum()

    series = []
    power = np.eye(n)
    for t in range(1, horizon + 1):
        power = power @ kernel
        series.append((t, float(0.5 * np.max(np.sum(np.abs(power - d[None, :]), axis=1)))))
    ts = np.array([p[0] for p in series], dtype=float)
    tv = np.array([p[1] for p in series])
    keep = tv > TV_FLOOR
    if keep.sum() >= 2:
        slope, intercept = np.polyfit(ts[keep], np.log(tv[keep]), 1)
        mix_m, mix_rho = float(math.exp(intercept)), float(math.exp(slope))
    else:
        mix_m, mix_rho = float(max(tv[0], TV_FLOOR) / TV_FLOOR), 0.0
    d_sa = d.reshape(mdp.n_states, mdp.n_actions)
    return ChainDiagnostics(d_sa, float(d.min()), float(d.max()), tuple(series), mix_m, mix_rho, residual)


class TrajectorySource:
    """Single trajectory s_0 ~ initial, a_t ~ behavior(.|s_t), s_{t+1} ~ P*(.|s_t, a_t).

    Uniforms come from one sequential generator keyed by the seed, so equal
    seeds give identical trajectories. Sequential use only.
    """

    def __init__(self, mdp: TabularMdp, behavior, initial=None, seed: int = 0):
        self.mdp = mdp
        self.behavior = check_policy(mdp, behavior)
        n_s = mdp.n_states
        initial = np.full(n_s, 1.0 / n_s) if initial is None else np.asarray(initial, dtype=float)
        if initial.shape != (n_s,) or np.any(initial < 0) or abs(initial.sum() - 1.0) > 1e-9:
            raise ValueError("initial must be a distribution over states")
        self.initial = initial
        self.seed = int(seed)
        self._gen = _keyed_generator(self.seed, TRAJECTORY)
        self._next_cdf = _cdf_table(mdp.transition).tolist()
        self._act_cdf = _cdf_table(self.behavior).tolist()
        self._reward = np.asarray(mdp.reward).tolist()
        self._buf: list = []
        self._pos = 0
        self.t = 0
        self.state = bisect.bisect_right(_cdf_table(initial).tolist(), self._uniform())
        self._warn_if_trapping()

    def _warn_if_trapping(self):
        p_pi = np.einsum("sa,sat->st", self.behavior, self.mdp.transition)
        n_comp, labels, closed = _closed_classes(p_pi)
        if n_comp > 1:
            trap = ", ".join(str(int(s)) for c in closed for s in c)
            warnings.warn(f"trajectory will eventually be confined to states {{{trap}}}", RuntimeWarning, stacklevel=3)

    def _uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(4096).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    @property
    def draws(self) -> int:
        return self.t

    def step(self):
        """Advance one step and return (s, a, r, s')."""
        s = self.state
        a = bisect.bisect_right(self._act_cdf[s], self._uniform())
        s_next = bisect.bisect_right(self._next_cdf[s][a], self._uniform())
        self.state = s_next
        self.t += 1
        return s, a, self._reward[s][a], s_next

    def take(self, n: int):
        """Next n transitions as lists (s, a, r, s')."""
        return [self.step() for _ in range(n)]


def step_trajectory(src: TrajectorySource):
    return src.step()


def export_trajectory_csv(src: TrajectorySource, n: int, path) -> None:
    """Advance ``src`` by n steps, writing rows t,s,a,r,s_next."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "s", "a", "r", "s_next"])
        for _ in range(n):
            t = src.t
            s, a, r, s_next = src.step()
            w.writerow([t, s, a, repr(float(r)), s_next])
