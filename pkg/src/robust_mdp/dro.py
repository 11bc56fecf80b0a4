"""Single-distribution DRO solvers: exact duals, a primal brute-force oracle and SGA."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .divergence import (
    DivergenceKind,
    RobustSpec,
    divergence,
    f_conjugate_grad,
    theta_range,
    scalar_gradient,
    _sample_objective,
)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
GOLDEN_ITERS = 64
LAMBDA_GRID = 200
LAMBDA_POLISH = 30
LAMBDA_GRID_LO = 1e-8
LAMBDA_GRID_HI = 1e4


@dataclass(frozen=True)
class DroSolution:
    value: float
    eta_star: float
    lambda_star: float | None = None
    worst_distribution: np.ndarray | None = None
    degenerate: bool = False


def golden_section_max(fun: Callable, lo, hi, iters: int = GOLDEN_ITERS):
    """Elementwise golden-section maximization of a concave ``fun`` on [lo, hi].

    ``lo``/``hi`` broadcast to the batch shape; ``fun`` maps an array of points
    of that shape to values of the same shape. Returns ``(x, fun(x))``.
    """
    lo, hi = (np.array(a, dtype=float) for a in np.broadcast_arrays(lo, hi))
    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        x = np.where(left, hi - INV_PHI * (hi - lo), lo + INV_PHI * (hi - lo))
        fx = fun(x)
        c, d = np.where(left, x, d), np.where(left, c, x)
        fc, fd = np.where(left, fx, fd), np.where(left, fc, fx)
    x = np.where(fc >= fd, c, d)
    return x, np.maximum(fc, fd)


def chi_square_dual_argmax(p: np.ndarray, v: np.ndarray, lam) -> np.ndarray:
    """Exact maximizer of the chi-square penalized dual, row by row.

    With u = eta + 2*lam the stationarity condition is
    sum_i p_i (u - v_i)_+ = 2*lam, piecewise linear and increasing in u; the
    root is found on the segment between consecutive sorted values.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.broadcast_to(np.asarray(v, dtype=float), p.shape)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), p.shape[:1])
    order = np.argsort(v, axis=1, kind="stable")
    vs = np.take_along_axis(v, order, axis=1)
    ps = np.take_along_axis(p, order, axis=1)
    mass = np.cumsum(ps, axis=1)
    first = np.cumsum(ps * vs, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (2.0 * lam[:, None] + first) / mass
    upper = np.concatenate([vs[:, 1:], np.full((p.shape[0], 1), np.inf)], axis=1)
    valid = (mass > 0) & (u >= vs) & (u <= upper)
    k = np.argmax(valid, axis=1)
    return u[np.arange(p.shape[0]), k] - 2.0 * lam


def penalized_dual_batch(spec: RobustSpec, p: np.ndarray, v: np.ndarray, lam=None, method: str = "closed_form"):
    """Maximize the penalized dual for a batch of rows.

    Args:
        p: nominal rows, shape (K, S).
        v: values, shape (S,) or (K, S).
        lam: optional per-row penalty, shape (K,); defaults to ``spec.lam``.
        method: ``"golden"`` (golden-section over Theta, any divergence) or
            ``"closed_form"`` (chi-square only).

    Returns:
        (value, eta) arrays of shape (K,).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.asarray(v, dtype=float)
    if method == "closed_form" and spec.kind is not DivergenceKind.CHI_SQUARE:
        method = "golden"
    if lam is None:
        lam = spec.lam
        lo, hi = spec.theta_lo, spec.theta_hi
    else:
        lam = np.asarray(lam, dtype=float)
        lo, hi = theta_range(spec.kind, lam, spec.gamma)
    lam_col = np.asarray(lam)[..., None] if np.ndim(lam) else lam
    kind = spec.kind

    def objective(eta):
        return np.sum(p * _sample_objective(kind, lam_col, eta[..., None], v), axis=-1)

    lo, hi = np.broadcast_to(lo, p.shape[:1]), np.broadcast_to(hi, p.shape[:1])
    if method == "closed_form":
        eta = np.clip(chi_square_dual_argmax(p, v, lam), lo, hi)
        return objective(eta), eta
    if method != "golden":
        raise ValueError(f"unknown method {method!r}")
    eta, value = golden_section_max(objective, lo, hi)
    return value, eta


def _worst_case(spec: RobustSpec, p_row, v, eta, lam):
    w = p_row * f_conjugate_grad(spec.kind, (eta - v) / lam)
    total = w.sum()
    if total > 0:
        return w / total, False
    support = p_row > 0
    vmin = v[support].min()
    q = (support & (v == vmin)).astype(float)
    return q / q.sum(), True


def _check_row(p_row, v):
    p_row = np.asarray(p_row, dtype=float)
    v = np.asarray(v, dtype=float)
    if p_row.shape != v.shape or p_row.ndim != 1:
        raise ValueError("p_row and v must be 1-D of equal length")
    if np.any(p_row < 0) or abs(p_row.sum() - 1.0) > 1e-9:
        raise ValueError("p_row must be a probability vector")
    return p_row, v


def solve_penalized_exact(spec: RobustSpec, p_row, v, method: str = "closed_form") -> DroSolution:
    """inf_q q@v + lam D_f(q||p) via the one-dimensional dual over Theta."""
    p_row, v = _check_row(p_row, v)
    value, eta = penalized_dual_batch(spec, p_row[None], v, method=method)
    eta = float(eta[0])
    q, degenerate = _worst_case(spec, p_row, v, eta, spec.lam)
    return DroSolution(float(value[0]), eta, None, q, degenerate)


@functools.lru_cache(maxsize=16)
def _simplex_grid(k: int, n: int) -> np.ndarray:
    """All points of the k-simplex with coordinates in {0, 1/n, ..., 1}."""
    axes = np.meshgrid(*[np.arange(n + 1)] * (k - 1), indexing="ij")
    pts = np.stack([a.ravel() for a in axes], axis=1).astype(float) if k > 1 else np.zeros((1, 0))
    pts = pts[pts.sum(axis=1) <= n]
    grid = np.column_stack([pts, n - pts.sum(axis=1)]) / n
    grid.flags.writeable = False
    return grid


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(y) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(y - css[rho] / (rho + 1.0), 0.0)


def solve_penalized_primal_oracle(spec: RobustSpec, p_row, v, grid: int = 100) -> float:
    """Brute-force primal minimum over a simplex grid, then projected-gradient polish.

    Test-scale only: refuses rows whose support exceeds four states.
    """
    p_row, v = _check_row(p_row, v)
    support = p_row > 0
    k = int(support.sum())
    if k > 4:
        raise ValueError(f"primal oracle supports at most 4 states, got {k}")
    p, w = p_row[support], v[support]
    lam = spec.lam

    def primal(q):
        return q @ w + lam * np.sum((q - p) ** 2 / p, axis=-1)

    if k == 1:
        return float(w[0])
    pts = _simplex_grid(k, grid)
    vals = primal(pts)
    q = pts[np.argmin(vals)]
    best = float(vals.min())
    step = p.min() / (2.0 * lam)
    for _ in range(50_000):
        q_new = project_simplex(q - step * (w + 2.0 * lam * (q - p) / p))
        if np.max(np.abs(q_new - q)) < 1e-15:
            q = q_new
            break
        q = q_new
    full = np.zeros_like(p_row)
    full[support] = q
    polished = float(q @ w + lam * divergence(spec.kind, full, p_row))
    return min(best, polished)


def constrained_dual_batch(spec: RobustSpec, p: np.ndarray, v: np.ndarray, rho: float, method: str = "closed_form"):
    """Maximize sup_{lam>=0} [R_p(lam) - lam*rho] for a batch of rows.

    Log-spaced lambda grid followed by golden-section polish in log(lambda)
    around the best grid point; lambda = 0 (value min over support) is
    included as a candidate. ``method`` selects the inner eta solver.

    Returns:
        (value, lambda_star, eta_star) arrays of shape (K,).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.broadcast_to(np.asarray(v, dtype=float), p.shape)
    k, n = p.shape
    spread = float(np.max(v.max(axis=1) - v.min(axis=1)))
    hi = max(LAMBDA_GRID_HI, spread / math.sqrt(rho))
    grid = np.geomspace(LAMBDA_GRID_LO, hi, LAMBDA_GRID)

    pk = np.repeat(p, LAMBDA_GRID, axis=0)
    vk = np.repeat(v, LAMBDA_GRID, axis=0)
    lk = np.tile(grid, k)
    val, _ = penalized_dual_batch(spec, pk, vk, lam=lk, method=method)
    g = (val - lk * rho).reshape(k, LAMBDA_GRID)
    i = np.argmax(g, axis=1)
    log_grid = np.log(grid)
    a = log_grid[np.maximum(i - 1, 0)]
    b = log_grid[np.minimum(i + 1, LAMBDA_GRID - 1)]

    def outer(log_lam):
        lam = np.exp(log_lam)
        val, _ = penalized_dual_batch(spec, p, v, lam=lam, method=method)
        return val - lam * rho

    log_lam, g_pol = golden_section_max(outer, a, b, iters=LAMBDA_POLISH)
    lam_star = np.exp(log_lam)
    g_grid = g[np.arange(k), i]
    use_grid = g_grid > g_pol
    lam_star = np.where(use_grid, grid[i], lam_star)
    value = np.maximum(g_grid, g_pol)

    zero_val = np.where(p > 0, v, np.inf).min(axis=1)
    at_zero = zero_val >= value
    value = np.where(at_zero, zero_val, value)
    lam_star = np.where(at_zero, 0.0, lam_star)
    _, eta = penalized_dual_batch(spec, p, v, lam=np.maximum(lam_star, LAMBDA_GRID_LO), method=method)
    return value, lam_star, eta


def solve_constrained_exact(spec: RobustSpec, p_row, v, method: str = "closed_form") -> DroSolution:
    """inf_q q@v s.t. D_f(q||p) <= rho via the two-variable dual."""
    if spec.rho is None:
        raise ValueError("spec must be in constrained (rho) mode")
    p_row, v = _check_row(p_row, v)
    value, lam, eta = constrained_dual_batch(spec, p_row[None], v, spec.rho, method=method)
    lam, eta = float(lam[0]), float(eta[0])
    q, degenerate = _worst_case(spec, p_row, v, eta, max(lam, LAMBDA_GRID_LO))
    return DroSolution(float(value[0]), eta, lam, q, degenerate)


def theory_alpha(spec: RobustSpec) -> Callable[[int], float]:
    """alpha_t = diam(Theta) / (C_g sqrt(t)), t = 1, 2, ..."""
    scale = spec.diam / spec.c_g
    return lambda t: scale / math.sqrt(t)


def lambda_sqrt_alpha(spec: RobustSpec) -> Callable[[int], float]:
    """alpha_t = lam / sqrt(t), the inner-loop rate used in the chain experiments."""
    lam = spec.lam
    return lambda t: lam / math.sqrt(t)


def constant_alpha(value: float) -> Callable[[int], float]:
    return lambda t: value


def sga_solve(
    spec: RobustSpec,
    sample_stream: Iterable[int],
    v,
    t_max: int,
    eta0: float = 0.0,
    schedule: Callable[[int], float] | None = None,
    trace: list | None = None,
) -> float:
    """Projected stochastic gradient ascent on the penalized dual.

    ``sample_stream`` yields next-state indices into ``v``. Step ``t``
    (1-based) uses ``schedule(t)``; iterates are clamped to Theta and, when
    ``trace`` is given, appended to it.
    """
    lo, hi = spec.theta_lo, spec.theta_hi
    if not lo <= eta0 <= hi:
        raise ValueError(f"eta0={eta0} outside Theta=[{lo}, {hi}]")
    if schedule is None:
        schedule = theory_alpha(spec)
    v = np.asarray(v, dtype=float)
    v_list = v.tolist()
    grad_fn = scalar_gradient(spec.kind, spec.lam)
    eta = float(eta0)
    t = 0
    for t, s_next in enumerate(sample_stream, start=1):
        grad = grad_fn(eta, v_list[s_next])
        eta = min(max(eta + schedule(t) * grad, lo), hi)
        if trace is not None:
            trace.append(eta)
        if t >= t_max:
            return eta
    if t == 0:
        raise ValueError("sample stream is empty")
    raise ValueError(f"sample stream exhausted after {t} of {t_max} samples")
