"""f-divergences, convex conjugates and the scalar penalized dual objective.

For a transition row ``p`` and value vector ``v`` the penalized inner problem

    inf_q  q @ v + lam * D_f(q || p)

has the one-dimensional concave dual

    sup_eta  -lam * E_p[f*((eta - v) / lam)] + eta,

whose single-sample integrand ``J(eta; v(s'))`` is what the stochastic
algorithms ascend.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np


class DivergenceKind(str, enum.Enum):
    CHI_SQUARE = "chi_square"


def f_value(kind: DivergenceKind, t):
    """Generator f; chi-square: (t - 1)^2 on t >= 0 and +inf below."""
    t = np.asarray(t, dtype=float)
    if kind is DivergenceKind.CHI_SQUARE:
        out = np.where(t >= 0.0, (t - 1.0) ** 2, np.inf)
    else:
        raise NotImplementedError(kind)
    return out[()] if out.ndim == 0 else out


def f_conjugate(kind: DivergenceKind, s):
    """Convex conjugate f*(s) = sup_t {s t - f(t)}; chi-square: (s/2 + 1)_+^2 - 1."""
    s = np.asarray(s, dtype=float)
    if kind is DivergenceKind.CHI_SQUARE:
        out = np.maximum(s / 2.0 + 1.0, 0.0) ** 2 - 1.0
    else:
        raise NotImplementedError(kind)
    return out[()] if out.ndim == 0 else out


def f_conjugate_grad(kind: DivergenceKind, s):
    """Derivative of f*; the chi-square kink at s = -2 takes the left limit 0."""
    s = np.asarray(s, dtype=float)
    if kind is DivergenceKind.CHI_SQUARE:
        out = np.maximum(s / 2.0 + 1.0, 0.0)
    else:
        raise NotImplementedError(kind)
    return out[()] if out.ndim == 0 else out


def divergence(kind: DivergenceKind, q, p) -> float:
    """D_f(q || p), +inf when q is not absolutely continuous w.r.t. p."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any((p == 0) & (q > 0)):
        return np.inf
    on = p > 0
    return float(np.sum(p[on] * f_value(kind, q[on] / p[on])))


def strong_convexity(kind: DivergenceKind) -> float:
    if kind is DivergenceKind.CHI_SQUARE:
        return 2.0
    raise NotImplementedError(kind)


def theta_range(kind: DivergenceKind, lam: float, gamma: float) -> tuple[float, float]:
    """Interval guaranteed to contain the optimal dual variable eta*."""
    if np.any(np.asarray(lam) <= 0):
        raise ValueError("lambda must be positive")
    if kind is DivergenceKind.CHI_SQUARE:
        return -2.0 * lam, 2.0 / (1.0 - gamma) + 2.0 * lam
    raise NotImplementedError(kind)


def _sample_objective(kind, lam, eta, v_next):
    if kind is DivergenceKind.CHI_SQUARE:
        # -lam * f*((eta - v)/lam) + eta rearranged to avoid cancelling O(lam) terms
        d = eta - v_next
        return np.where(d >= -2.0 * lam, v_next - d * d / (4.0 * lam), lam + eta)
    return -lam * f_conjugate(kind, (eta - v_next) / lam) + eta


def _sample_gradient(kind, lam, eta, v_next):
    return 1.0 - f_conjugate_grad(kind, (eta - v_next) / lam)


def scalar_gradient(kind: DivergenceKind, lam: float):
    """Plain-float version of dJ/d eta for per-sample loops."""
    if kind is DivergenceKind.CHI_SQUARE:
        inv = 1.0 / (2.0 * lam)

        def grad(eta: float, v_next: float) -> float:
            u = (eta - v_next) * inv + 1.0
            return 1.0 - u if u > 0.0 else 1.0

        return grad
    return lambda eta, v_next: float(_sample_gradient(kind, lam, eta, v_next))


def scalar_objective(kind: DivergenceKind, lam: float):
    """Plain-float version of J(eta; v') for per-sample loops."""
    if kind is DivergenceKind.CHI_SQUARE:
        inv = 1.0 / (4.0 * lam)

        def obj(eta: float, v_next: float) -> float:
            d = eta - v_next
            return v_next - d * d * inv if d >= -2.0 * lam else lam + eta

        return obj
    return lambda eta, v_next: float(_sample_objective(kind, lam, eta, v_next))


@dataclass(frozen=True)
class RobustSpec:
    """Robustness setting plus the constants the learning algorithms consume.

    Exactly one of ``lam`` (penalized mode) or ``rho`` (constrained mode) is
    set. In constrained mode the dual range depends on the inner multiplier,
    so the derived constants are left as ``None``.
    """

    gamma: float
    lam: float | None = None
    rho: float | None = None
    kind: DivergenceKind = DivergenceKind.CHI_SQUARE
    theta_lo: float | None = field(default=None, init=False)
    theta_hi: float | None = field(default=None, init=False)
    sigma: float = field(default=0.0, init=False)
    c_g: float | None = field(default=None, init=False)
    c_m: float | None = field(default=None, init=False)
    kappa: float | None = field(default=None, init=False)

    def __post_init__(self):
        if (self.lam is None) == (self.rho is None):
            raise ValueError("set exactly one of lam or rho")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        object.__setattr__(self, "kind", DivergenceKind(self.kind))
        object.__setattr__(self, "sigma", strong_convexity(self.kind))
        if self.rho is not None:
            if self.rho <= 0:
                raise ValueError("rho must be positive")
            return
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        lo, hi = theta_range(self.kind, self.lam, self.gamma)
        v_max = 1.0 / (1.0 - self.gamma)
        object.__setattr__(self, "theta_lo", lo)
        object.__setattr__(self, "theta_hi", hi)
        object.__setattr__(self, "c_g", (hi - lo + v_max) / (self.lam * self.sigma))
        # |J| over Theta x [0, v_max]; the grid contains the box corners where
        # the chi-square extremes sit.
        etas = np.linspace(lo, hi, 1001)[:, None]
        vs = np.linspace(0.0, v_max, 1001)[None, :]
        j_max = float(np.max(np.abs(_sample_objective(self.kind, self.lam, etas, vs))))
        object.__setattr__(self, "c_m", max(j_max, v_max))
        object.__setattr__(self, "kappa", 1.0 / (6.0 * (self.lam + v_max)))

    @classmethod
    def penalized(cls, lam: float, gamma: float, kind=DivergenceKind.CHI_SQUARE) -> "RobustSpec":
        return cls(gamma=gamma, lam=lam, kind=kind)

    @classmethod
    def constrained(cls, rho: float, gamma: float, kind=DivergenceKind.CHI_SQUARE) -> "RobustSpec":
        return cls(gamma=gamma, rho=rho, kind=kind)

    @property
    def mode(self) -> str:
        return "penalized" if self.lam is not None else "constrained"

    @property
    def diam(self) -> float:
        return self.theta_hi - self.theta_lo

    @property
    def v_max(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def with_lambda(self, lam: float) -> "RobustSpec":
        return RobustSpec(gamma=self.gamma, lam=lam, kind=self.kind)

    def project(self, eta):
        return np.clip(eta, self.theta_lo, self.theta_hi)

    def to_dict(self) -> dict:
        out = {"divergence": self.kind.value, "gamma": self.gamma}
        if self.lam is not None:
            out["lambda"] = self.lam
            out["derived"] = {
                "theta": [self.theta_lo, self.theta_hi],
                "sigma": self.sigma,
                "c_g": self.c_g,
                "c_m": self.c_m,
                "kappa": self.kappa,
            }
        else:
            out["rho"] = self.rho
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "RobustSpec":
        # derived constants are recomputed, never trusted from the file
        kind = DivergenceKind(data.get("divergence", "chi_square"))
        return cls(gamma=float(data["gamma"]), lam=data.get("lambda"), rho=data.get("rho"), kind=kind)


def dual_objective_sample(spec: RobustSpec, eta, v_next):
    """J(eta; v') = -lam * f*((eta - v') / lam) + eta."""
    return _sample_objective(spec.kind, spec.lam, np.asarray(eta, dtype=float), np.asarray(v_next, dtype=float))


def dual_gradient_sample(spec: RobustSpec, eta, v_next):
    """dJ(eta; v')/d eta = 1 - f*'((eta - v') / lam)."""
    return _sample_gradient(spec.kind, spec.lam, np.asarray(eta, dtype=float), np.asarray(v_next, dtype=float))


def dual_objective_expected(spec: RobustSpec, eta, p_row, v):
    """E_{s'~p_row} J(eta; v(s')). Broadcasts over leading axes of ``eta``."""
    eta = np.asarray(eta, dtype=float)
    p_row = np.asarray(p_row, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.sum(p_row * dual_objective_sample(spec, eta[..., None], v), axis=-1)


def dual_gradient_expected(spec: RobustSpec, eta, p_row, v):
    eta = np.asarray(eta, dtype=float)
    return np.sum(np.asarray(p_row) * dual_gradient_sample(spec, eta[..., None], np.asarray(v)), axis=-1)
