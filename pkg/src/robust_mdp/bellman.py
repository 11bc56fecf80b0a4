"""Penalized and constrained robust Bellman operators and model-based planning."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .divergence import RobustSpec, dual_gradient_sample, dual_objective_sample
from .dro import constrained_dual_batch, penalized_dual_batch
from .mdp import TabularMdp, standard_value_iteration


BOUND_SLACK = 1e-9


class CalibrationError(RuntimeError):
    pass


@dataclass
class RobustPlanResult:
    v_star: np.ndarray
    q_star: np.ndarray
    eta_star: np.ndarray
    residual: float
    iterations: int
    converged: bool
    mode: str
    residual_trace: list = field(default_factory=list)
    lambda_star: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "v_star": self.v_star.tolist(),
            "q_star": self.q_star.tolist(),
            "eta_star": self.eta_star.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_trace": list(self.residual_trace),
        }
        if self.lambda_star is not None:
            out["lambda_star"] = self.lambda_star.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _rows(mdp: TabularMdp) -> np.ndarray:
    return mdp.transition.reshape(-1, mdp.n_states)


def penalized_inner(mdp: TabularMdp, spec: RobustSpec, v: np.ndarray):
    """Exact sup_eta J^{(s,a)}(eta, v) for every (s, a); returns (values, etas) shaped (S, A).

    Each value is checked against min_{support} v <= R_p <= E_p v.
    """
    rows = _rows(mdp)
    val, eta = penalized_dual_batch(spec, rows, v)
    lower = np.where(rows > 0, v[None, :], np.inf).min(axis=1)
    upper = rows @ v
    slack = BOUND_SLACK * (1.0 + np.abs(upper))
    if np.any(val < lower - slack) or np.any(val > upper + slack):
        raise ArithmeticError("penalized inner value left [min v, E_p v]")
    shape = (mdp.n_states, mdp.n_actions)
    return val.reshape(shape), eta.reshape(shape)


def apply_penalized_operator_v(mdp: TabularMdp, spec: RobustSpec, v) -> np.ndarray:
    """max_a R(s,a) + gamma * R_p(P*(.|s,a), v), clamped to [0, 1/(1-gamma)]."""
    inner, _ = penalized_inner(mdp, spec, np.asarray(v, dtype=float))
    return np.clip((mdp.reward + mdp.gamma * inner).max(axis=1), 0.0, mdp.v_max)


def apply_penalized_operator_q(mdp: TabularMdp, spec: RobustSpec, q) -> np.ndarray:
    """R(s,a) + gamma * sup_eta J^{(s,a)}(eta, max_a' q(., a'))."""
    inner, _ = penalized_inner(mdp, spec, np.asarray(q, dtype=float).max(axis=1))
    return mdp.reward + mdp.gamma * inner


def apply_constrained_operator_v(mdp: TabularMdp, spec: RobustSpec, v) -> np.ndarray:
    val, _, _ = constrained_dual_batch(spec, _rows(mdp), np.asarray(v, dtype=float), spec.rho)
    inner = val.reshape(mdp.n_states, mdp.n_actions)
    return np.clip((mdp.reward + mdp.gamma * inner).max(axis=1), 0.0, mdp.v_max)


def robust_value_iteration(
    mdp: TabularMdp,
    spec: RobustSpec,
    mode: str = "exact",
    T: int = 10_000,
    tol: float = 1e-10,
    inner_steps: int = 1000,
    inner_alpha=None,
    warm_start: bool = True,
    v0=None,
    init: str | None = None,
) -> RobustPlanResult:
    """Model-based robust Q iteration on the penalized operator.

    ``Q_{t+1}(s,a) = R(s,a) + gamma * J(eta_t(s,a), V_t)`` with
    ``V_t = clip(max_a Q_t, 0, 1/(1-gamma))``.

    Args:
        mode: ``"exact"`` maximizes each inner dual exactly (closed form for chi-square);
            ``"sga"`` runs ``inner_steps`` projected ascent steps on the
            expected dual gradient.
        inner_alpha: step rule ``t' -> alpha`` (1-based) for ``"sga"``;
            defaults to the constant ``lam``.
        warm_start: in ``"sga"`` mode, start each inner loop at the previous
            outer iteration's duals instead of zero.
        v0: optional starting value vector (replaces ``max_a Q_0``).
        init: ``"zero"`` (Q_0 = 0) or ``"upper"`` (Q_0 = 1/(1-gamma)).
            Defaults to ``"zero"`` for ``"exact"`` and ``"upper"`` for
            ``"sga"``. Iterating up from zero keeps zero-valued absorbing
            states at exactly zero.

    The returned ``residual`` is the exact-operator residual of ``v_star``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode not in ("exact", "sga"):
        raise ValueError(f"unknown mode {mode!r}")
    if init is None:
        init = "zero" if mode == "exact" else "upper"
    if init not in ("zero", "upper"):
        raise ValueError(f"unknown init {init!r}")
    n_s, n_a = mdp.n_states, mdp.n_actions
    if v0 is not None:
        v = np.clip(np.asarray(v0, dtype=float), 0.0, mdp.v_max)
    else:
        v = np.full(n_s, mdp.v_max if init == "upper" else 0.0)
    rows = _rows(mdp)
    eta = np.zeros(n_s * n_a)
    alpha = inner_alpha if inner_alpha is not None else (lambda t: spec.lam)
    trace = []
    converged = False
    q = None
    for it in range(1, T + 1):
        if mode == "exact":
            val, eta = (x.ravel() for x in penalized_inner(mdp, spec, v))
        else:
            if not warm_start:
                eta = np.zeros(n_s * n_a)
            for tp in range(1, inner_steps + 1):
                grad = np.sum(rows * dual_gradient_sample(spec, eta[:, None], v), axis=1)
                eta = spec.project(eta + alpha(tp) * grad)
            val = np.sum(rows * dual_objective_sample(spec, eta[:, None], v), axis=1)
        q = mdp.reward + mdp.gamma * val.reshape(n_s, n_a)
        v_next = np.clip(q.max(axis=1), 0.0, mdp.v_max)
        delta = float(np.max(np.abs(v_next - v)))
        trace.append(delta)
        if delta <= tol:
            converged = True
            break
        v = v_next
    if mode == "exact":
        residual = trace[-1]
    else:
        # report the exact-operator residual so both modes are comparable
        residual = float(np.max(np.abs(apply_penalized_operator_v(mdp, spec, v) - v)))
    return RobustPlanResult(
        v_star=v,
        q_star=q,
        eta_star=eta.reshape(n_s, n_a),
        residual=residual,
        iterations=it,
        converged=converged,
        mode=mode,
        residual_trace=trace,
    )


def constrained_value_iteration(mdp: TabularMdp, spec: RobustSpec, T: int = 10_000, tol: float = 1e-10, v0=None):
    """Value iteration on the constrained operator (two-variable dual inner solve), from V = 0."""
    if spec.rho is None:
        raise ValueError("spec must be in constrained (rho) mode")
    n_s, n_a = mdp.n_states, mdp.n_actions
    v = np.zeros(n_s) if v0 is None else np.clip(np.asarray(v0, dtype=float), 0.0, mdp.v_max)
    rows = _rows(mdp)
    trace = []
    converged = False
    for it in range(1, T + 1):
        val, lam, eta = constrained_dual_batch(spec, rows, v, spec.rho)
        q = mdp.reward + mdp.gamma * val.reshape(n_s, n_a)
        v_next = np.clip(q.max(axis=1), 0.0, mdp.v_max)
        delta = float(np.max(np.abs(v_next - v)))
        trace.append(delta)
        if delta <= tol:
            converged = True
            break
        v = v_next
    return RobustPlanResult(
        v_star=v,
        q_star=q,
        eta_star=eta.reshape(n_s, n_a),
        residual=trace[-1],
        iterations=it,
        converged=converged,
        mode="constrained",
        residual_trace=trace,
        lambda_star=lam.reshape(n_s, n_a),
    )


def min_value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of V(s) = max_a R(s,a) + gamma * min_{s' in supp P*(.|s,a)} V(s')."""
    support = mdp.transition > 0
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        worst = np.where(support, v[None, None, :], np.inf).min(axis=2)
        v_next = (mdp.reward + mdp.gamma * worst).max(axis=1)
        if np.max(np.abs(v_next - v)) <= tol:
            return v_next
        v = v_next
    raise RuntimeError("min-Bellman iteration did not converge")


@dataclass(frozen=True)
class Calibration:
    lam: float
    value_constrained: float
    value_penalized: float
    evaluations: int

    @property
    def gap(self) -> float:
        return abs(self.value_penalized - self.value_constrained)


def calibrate_lambda_for_rho(
    mdp: TabularMdp,
    spec_template: RobustSpec,
    rho: float,
    mu=None,
    tol: float = 1e-4,
    lam_lo: float = 1e-6,
    lam_hi: float = 1e6,
    max_bisections: int = 200,
) -> Calibration:
    """Find lam with V_rob,p(mu) = V_rob,c(mu) by log-scale bisection.

    The map lam -> V_rob,p(mu) is continuous and non-decreasing, so the
    bracket [lam_lo, lam_hi] is bisected until the mu-weighted gap is within
    ``tol``.

    Raises:
        CalibrationError: if the constrained value lies outside the bracket's
            achievable range.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    mu = np.full(mdp.n_states, 1.0 / mdp.n_states) if mu is None else np.asarray(mu, dtype=float)
    vi_tol = min(1e-9, tol * (1.0 - mdp.gamma) * 1e-3)
    cons = constrained_value_iteration(mdp, RobustSpec.constrained(rho, mdp.gamma, spec_template.kind), tol=vi_tol)
    target = float(mu @ cons.v_star)
    evaluations = 0

    def value_at(lam, v0):
        nonlocal evaluations
        evaluations += 1
        res = robust_value_iteration(mdp, spec_template.with_lambda(lam), tol=vi_tol, v0=v0)
        return float(mu @ res.v_star), res.v_star

    lo, hi = math.log(lam_lo), math.log(lam_hi)
    f_lo, v_lo = value_at(lam_lo, None)
    if f_lo - target > tol:
        raise CalibrationError(
            f"V_rob,c(mu)={target:.6g} is below V_p(mu, lam={lam_lo:g})={f_lo:.6g}; "
            f"achievable range is [V_0(mu), V*(mu))"
        )
    if abs(f_lo - target) <= tol:
        return Calibration(lam_lo, target, f_lo, evaluations)
    f_hi, v_hi = value_at(lam_hi, None)
    if target - f_hi > tol:
        raise CalibrationError(
            f"V_rob,c(mu)={target:.6g} exceeds V_p(mu, lam={lam_hi:g})={f_hi:.6g}; "
            f"achievable range is [V_0(mu), V*(mu))"
        )
    if abs(f_hi - target) <= tol:
        return Calibration(lam_hi, target, f_hi, evaluations)
    for _ in range(max_bisections):
        mid = 0.5 * (lo + hi)
        f_mid, v_mid = value_at(math.exp(mid), 0.5 * (v_lo + v_hi))
        if abs(f_mid - target) <= tol:
            return Calibration(math.exp(mid), target, f_mid, evaluations)
        if f_mid < target:
            lo, v_lo = mid, v_mid
        else:
            hi, v_hi = mid, v_mid
    raise CalibrationError(f"bisection did not reach tol={tol} in {max_bisections} steps")


def non_robust_values(mdp: TabularMdp, tol: float = 1e-12) -> np.ndarray:
    v, _ = standard_value_iteration(mdp, tol=tol)
    return v
