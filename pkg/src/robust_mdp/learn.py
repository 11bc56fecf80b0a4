"""Model-free robust Q-learning: generative-model and single-trajectory variants."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .divergence import RobustSpec, dual_objective_expected, scalar_gradient, scalar_objective
from .divergence import _sample_gradient, _sample_objective
from .dro import penalized_dual_batch
from .samplers import INNER, OUTER, ChainDiagnostics, GenerativeModel, TrajectorySource, stationary_distribution

BETA_RULES = ("theory", "experimental", "constant", "markov")
ALPHA_RULES = ("theory", "lambda_sqrt", "constant", "markov")


class DivergedError(RuntimeError):
    """A learning run produced a non-finite value; carries the state at failure."""

    def __init__(self, algo: str, step: int, q: np.ndarray, eta: np.ndarray, v: np.ndarray):
        np.set_printoptions(precision=6)
        super().__init__(
            f"{algo}: non-finite iterate at step {step}\n"
            f"Q=\n{np.array2string(q)}\neta=\n{np.array2string(eta)}\nV={np.array2string(v)}"
        )
        self.step, self.q, self.eta, self.v = step, q, eta, v


@dataclass(frozen=True)
class ScheduleSpec:
    """Outer (beta) and inner (alpha) step-size rules.

    Rules are evaluated at the algorithm's 0-based loop index k:

    * beta ``theory``: 1/(1 + (1-gamma)(k+1)); ``experimental``: 1/(1 + (1-gamma)k);
      ``constant``: ``beta_value``; ``markov``: 1/((1-gamma) d_min (k + p_dag)),
      capped at 1.
    * alpha ``theory``: diam(Theta)/(C_g sqrt(k+1)); ``lambda_sqrt``: lam/sqrt(k+1);
      ``constant``: ``alpha_value`` (default lam); ``markov``:
      1/(kappa d_min (k + p_alpha)^(2/3)).

    The ``markov`` rules use p_alpha = ceil((d_max/d_min)^1.5) and
    p_dag = ceil(d_max/((1-gamma) d_min)).
    """

    beta: str = "theory"
    alpha: str = "theory"
    beta_value: float = 0.1
    alpha_value: float | None = None

    def __post_init__(self):
        if self.beta not in BETA_RULES:
            raise ValueError(f"unknown beta rule {self.beta!r}")
        if self.alpha not in ALPHA_RULES:
            raise ValueError(f"unknown alpha rule {self.alpha!r}")
        if not 0.0 < self.beta_value <= 1.0:
            raise ValueError("beta_value must lie in (0, 1]")
        if self.alpha_value is not None and self.alpha_value <= 0:
            raise ValueError("alpha_value must be positive")

    @classmethod
    def generative_experiment(cls) -> "ScheduleSpec":
        return cls(beta="experimental", alpha="lambda_sqrt")

    @classmethod
    def markovian(cls) -> "ScheduleSpec":
        return cls(beta="markov", alpha="markov")

    def to_dict(self) -> dict:
        return asdict(self)

    def betas(self, k, gamma: float, d_min: float | None = None, d_max: float | None = None) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        if self.beta == "theory":
            out = 1.0 / (1.0 + (1.0 - gamma) * (k + 1.0))
        elif self.beta == "experimental":
            out = 1.0 / (1.0 + (1.0 - gamma) * k)
        elif self.beta == "constant":
            out = np.full_like(k, self.beta_value)
        else:
            _need(d_min, d_max)
            p_dag = math.ceil(d_max / ((1.0 - gamma) * d_min))
            out = np.minimum(1.0, 1.0 / ((1.0 - gamma) * d_min * (k + p_dag)))
        return out

    def alphas(self, k, spec: RobustSpec, d_min: float | None = None, d_max: float | None = None) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        if self.alpha == "theory":
            out = spec.diam / (spec.c_g * np.sqrt(k + 1.0))
        elif self.alpha == "lambda_sqrt":
            out = spec.lam / np.sqrt(k + 1.0)
        elif self.alpha == "constant":
            out = np.full_like(k, spec.lam if self.alpha_value is None else self.alpha_value)
        else:
            _need(d_min, d_max)
            p_alpha = math.ceil((d_max / d_min) ** 1.5)
            out = 1.0 / (spec.kappa * d_min * (k + p_alpha) ** (2.0 / 3.0))
        return out


def _need(d_min, d_max):
    if d_min is None or d_max is None:
        raise ValueError("markov schedules need d_min and d_max")
    if d_min <= 0:
        raise ValueError(f"markov schedules need d_min > 0, got {d_min}")


def check_beta_recursion(schedule: ScheduleSpec, gamma: float, t_max: int = 10**6, **chain) -> bool:
    """True when (1 - beta_t) beta_{t-1} <= beta_t for t = 1..t_max."""
    b = schedule.betas(np.arange(t_max + 1), gamma, **chain)
    lhs = (1.0 - b[1:]) * b[:-1]
    return bool(np.all(lhs <= b[1:] * (1.0 + 1e-12)))


def sup_error(q, q_ref) -> float:
    q, q_ref = np.asarray(q, dtype=float), np.asarray(q_ref, dtype=float)
    if q.shape != q_ref.shape:
        raise ValueError(f"shape mismatch {q.shape} vs {q_ref.shape}")
    return float(np.max(np.abs(q - q_ref)))


def mean_dual_gap(spec: RobustSpec, rows: np.ndarray, eta: np.ndarray, v: np.ndarray) -> float:
    """Average over cells of sup_eta J(eta, v) - J(eta_cell, v) under the nominal rows."""
    exact, _ = penalized_dual_batch(spec, rows, v)
    return float(np.mean(exact - dual_objective_expected(spec, eta.ravel(), rows, v)))


@dataclass
class RunRecord:
    """Telemetry of one learning run.

    The CSV carries only quantities that are a deterministic function of
    (config, seed); wall-clock times live in the JSON form.
    """

    algo: str
    lam: float
    seed: int
    config: dict
    steps: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    sup_error: list = field(default_factory=list)
    dual_gap: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    q_final: np.ndarray | None = None
    eta_final: np.ndarray | None = None
    theta_violations: int = 0
    q_abs_max: float = 0.0

    def log(self, step, samples, err, gap, seconds):
        if self.samples and samples <= self.samples[-1]:
            raise ValueError("sample counts must be strictly increasing")
        self.steps.append(int(step))
        self.samples.append(int(samples))
        self.sup_error.append(float(err))
        self.dual_gap.append(float(gap))
        self.seconds.append(float(seconds))

    @property
    def file_stem(self) -> str:
        return f"{self.algo}_{self.lam:g}_{self.seed}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["samples", "sup_error", "dual_gap"])
        for n, e, g in zip(self.samples, self.sup_error, self.dual_gap):
            w.writerow([n, repr(e), repr(g)])
        return buf.getvalue()

    def write_csv(self, directory) -> str:
        from pathlib import Path

        path = Path(directory) / f"{self.file_stem}.csv"
        path.write_text(self.to_csv())
        return str(path)

    def error_at(self, step: int) -> float:
        """Logged sup-error after ``step`` updates."""
        return self.sup_error[self.steps.index(step)]

    def to_dict(self) -> dict:
        return {
            "algo": self.algo,
            "lambda": self.lam,
            "seed": self.seed,
            "config": self.config,
            "steps": self.steps,
            "samples": self.samples,
            "sup_error": self.sup_error,
            "dual_gap": self.dual_gap,
            "seconds": self.seconds,
            "theta_violations": self.theta_violations,
            "q_abs_max": self.q_abs_max,
            "q_final": None if self.q_final is None else self.q_final.tolist(),
            "eta_final": None if self.eta_final is None else self.eta_final.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _count_violations(spec: RobustSpec, eta) -> int:
    eta = np.asarray(eta)
    return int(np.sum((eta < spec.theta_lo) | (eta > spec.theta_hi)))


def robust_q_generative(
    gm: GenerativeModel,
    spec: RobustSpec,
    T: int,
    T_prime: int,
    schedule: ScheduleSpec | None = None,
    q_ref: np.ndarray | None = None,
    warm_start: bool = False,
) -> RunRecord:
    """Nested projected SGA on the dual plus a Q-learning step, next states from ``gm``.

    Per outer step t: V_t = clip(max_a Q_t, 0, 1/(1-gamma)); for every cell run
    T_prime dual ascent steps from eta = 0 on fresh samples; then
    Q_{t+1} = (1 - beta_t) Q_t + beta_t (r_t + gamma J(eta, V_t; s'_t)).
    Errors against ``q_ref`` are logged after every outer step.
    """
    if T < 1 or T_prime < 1:
        raise ValueError("T and T_prime must be >= 1")
    if spec.lam is None:
        raise ValueError("spec must be penalized")
    schedule = schedule or ScheduleSpec()
    mdp = gm.mdp
    n_s, n_a = mdp.n_states, mdp.n_actions
    lam, kind, gamma = spec.lam, spec.kind, mdp.gamma
    rows = mdp.transition.reshape(-1, n_s)
    betas = schedule.betas(np.arange(T), gamma)
    alphas = schedule.alphas(np.arange(T_prime), spec)
    lo, hi = spec.theta_lo, spec.theta_hi
    record = RunRecord(
        "generative",
        lam,
        gm.seed,
        {"T": T, "T_prime": T_prime, "schedule": schedule.to_dict(), "warm_start": warm_start, "spec": spec.to_dict()},
    )
    q = np.full((n_s, n_a), mdp.v_max)
    eta = np.zeros((n_s, n_a))
    record.q_abs_max = mdp.v_max
    start_draws = gm.draws
    t0 = time.perf_counter()
    for t in range(T):
        v = np.clip(q.max(axis=1), 0.0, mdp.v_max)
        v_inner = v[gm.next_states(INNER, t, T_prime)]
        if not warm_start:
            eta = np.zeros((n_s, n_a))
        for k in range(T_prime):
            eta = np.clip(eta + alphas[k] * _sample_gradient(kind, lam, eta, v_inner[k]), lo, hi)
            record.theta_violations += _count_violations(spec, eta)
        s_next = gm.next_states(OUTER, t, 1)[0]
        target = gm.rewards(t) + gamma * _sample_objective(kind, lam, eta, v[s_next])
        q = (1.0 - betas[t]) * q + betas[t] * target
        record.q_abs_max = max(record.q_abs_max, float(np.max(np.abs(q))))
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(eta)):
            raise DivergedError("generative", t + 1, q, eta, v)
        if q_ref is not None:
            gap = mean_dual_gap(spec, rows, eta, v)
            record.log(t + 1, gm.draws - start_draws, sup_error(q, q_ref), gap, time.perf_counter() - t0)
    record.q_final, record.eta_final = q, eta
    return record


def robust_q_markovian(
    src: TrajectorySource,
    spec: RobustSpec,
    T: int,
    schedule: ScheduleSpec | None = None,
    q_ref: np.ndarray | None = None,
    diag: ChainDiagnostics | None = None,
    d_min: float | None = None,
    d_max: float | None = None,
    log_every: int | None = None,
    project_v: bool = True,
) -> RunRecord:
    """Two-time-scale update of the visited cell only, along one trajectory.

    At step t with transition (s, a, r, s'): the Q target uses the current
    eta(s, a) and V_t, then eta(s, a) takes a projected ascent step on the
    same sample, then V_{t+1}(s) = max_a Q_{t+1}(s, a).

    ``d_min``/``d_max`` override the chain diagnostics (for example with
    estimates); otherwise they come from ``diag`` or an exact stationary solve.

    With ``project_v`` (default) V is clipped to [0, 1/(1-gamma)] as in the
    generative variant; without it V can leave the range on which J is
    bounded and the iterates blow up.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if spec.lam is None:
        raise ValueError("spec must be penalized")
    schedule = schedule or ScheduleSpec.markovian()
    mdp = src.mdp
    if d_min is None or d_max is None:
        diag = diag or stationary_distribution(mdp, src.behavior)
        d_min = diag.d_min if d_min is None else d_min
        d_max = diag.d_max if d_max is None else d_max
    if d_min <= 0:
        raise ValueError(f"behavior chain has d_min={d_min}; every cell must be visited")
    log_every = log_every or max(1, T // 1000)
    n_s, n_a = mdp.n_states, mdp.n_actions
    gamma, lo, hi, v_max = mdp.gamma, spec.theta_lo, spec.theta_hi, mdp.v_max
    rows = mdp.transition.reshape(-1, n_s)
    # evaluated lazily in blocks to keep memory flat for long runs
    block = 65536
    record = RunRecord(
        "markovian",
        spec.lam,
        src.seed,
        {
            "T": T,
            "schedule": schedule.to_dict(),
            "d_min": d_min,
            "d_max": d_max,
            "project_v": project_v,
            "spec": spec.to_dict(),
        },
    )
    grad = scalar_gradient(spec.kind, spec.lam)
    obj = scalar_objective(spec.kind, spec.lam)
    q = [[mdp.v_max] * n_a for _ in range(n_s)]
    eta = [[0.0] * n_a for _ in range(n_s)]
    v = [mdp.v_max] * n_s
    start_draws = src.draws
    t0 = time.perf_counter()
    step = src.step
    q_abs_max = mdp.v_max
    for base in range(0, T, block):
        n = min(block, T - base)
        ks = np.arange(base, base + n)
        betas = schedule.betas(ks, gamma, d_min=d_min, d_max=d_max).tolist()
        alphas = schedule.alphas(ks, spec, d_min=d_min, d_max=d_max).tolist()
        for i in range(n):
            s, a, r, s_next = step()
            e = eta[s][a]
            v_next = v[s_next]
            beta = betas[i]
            q_sa = (1.0 - beta) * q[s][a] + beta * (r + gamma * obj(e, v_next))
            if not math.isfinite(q_sa):
                raise DivergedError("markovian", base + i + 1, np.array(q), np.array(eta), np.array(v))
            e = e + alphas[i] * grad(e, v_next)
            e = lo if e < lo else (hi if e > hi else e)
            q[s][a] = q_sa
            if abs(q_sa) > q_abs_max:
                q_abs_max = abs(q_sa)
            eta[s][a] = e
            best = max(q[s])
            if project_v:
                best = 0.0 if best < 0.0 else (v_max if best > v_max else best)
            v[s] = best
            t = base + i + 1
            if t % log_every == 0 or t == T:
                q_arr, eta_arr, v_arr = np.array(q), np.array(eta), np.array(v)
                if not (np.all(np.isfinite(q_arr)) and np.all(np.isfinite(eta_arr))):
                    raise DivergedError("markovian", t, q_arr, eta_arr, v_arr)
                record.theta_violations += _count_violations(spec, eta_arr)
                if q_ref is not None:
                    gap = mean_dual_gap(spec, rows, eta_arr, v_arr)
                    record.log(t, src.draws - start_draws, sup_error(q_arr, q_ref), gap, time.perf_counter() - t0)
    record.q_final, record.eta_final = np.array(q), np.array(eta)
    record.q_abs_max = q_abs_max
    if not np.all(np.isfinite(record.q_final)):
        raise DivergedError("markovian", T, record.q_final, record.eta_final, np.array(v))
    return record
