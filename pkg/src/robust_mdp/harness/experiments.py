"""Experiment drivers: sweeps, multi-seed orchestration and CSV emission."""

from __future__ import annotations

import csv
import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import __version__
from ..bellman import (
    CalibrationError,
    calibrate_lambda_for_rho,
    min_value_iteration,
    non_robust_values,
    robust_value_iteration,
)
from ..divergence import RobustSpec
from ..learn import DivergedError, ScheduleSpec, robust_q_generative, robust_q_markovian
from ..samplers import ChainError, GenerativeModel, TrajectorySource, estimate_empirical_model, stationary_distribution
from .envs import behavior_policy, build_environment

EXPERIMENTS = ("connection", "stat_error", "generative_convergence", "markovian_convergence", "rho_lambda_bridge")
DEFAULT_LAMBDAS = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0]
DEFAULT_PIS = [0.001, 0.005, 0.05, 0.1, 0.2, 0.5]
# a lambda is flagged unstable when the last decade of training fails to
# reduce its median error by at least this factor
STABLE_RATIO = 1.0

_DEFAULT_ENV = {
    "connection": "chain10_absorbing",
    "stat_error": "chain10_absorbing",
    "generative_convergence": "chain10_absorbing",
    "markovian_convergence": "chain10_recurrent",
    "rho_lambda_bridge": "chain10_absorbing",
}
_DEFAULT_SCHEDULE = {
    "generative_convergence": ScheduleSpec.generative_experiment(),
    "markovian_convergence": ScheduleSpec.markovian(),
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce an experiment's outputs.

    ``seeds`` is a count; run i uses seed ``base_seed + i``. ``planner``
    selects how stat_error solves the estimated model: ``exact`` dual
    maximization or ``sga`` inner ascent with T = T' = 100 and warm starts.
    """

    experiment: str
    environment: str | None = None
    env_path: str | None = None
    p: float = 0.9
    escape: float = 0.1
    gamma: float = 0.9
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    pis: list = field(default_factory=lambda: [0.5])
    T: int = 1000
    T_prime: list = field(default_factory=lambda: [100])
    n_list: list = field(default_factory=lambda: [250, 1000, 4000])
    rhos: list = field(default_factory=lambda: [0.05, 0.1, 0.5])
    seeds: int = 100
    base_seed: int = 0
    planner: str = "exact"
    beta_rule: str | None = None
    alpha_rule: str | None = None
    log_every: int | None = None
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.environment is None:
            self.environment = _DEFAULT_ENV[self.experiment]
        if any(lam <= 0 for lam in self.lambdas):
            raise ValueError("lambda values must be positive")
        if any(not 0.0 <= pi <= 1.0 for pi in self.pis):
            raise ValueError("behavior probabilities must lie in [0, 1]")
        if any(n < 1 for n in self.n_list) or any(r <= 0 for r in self.rhos):
            raise ValueError("sample sizes must be >= 1 and radii positive")
        if self.T < 1 or any(tp < 1 for tp in self.T_prime) or self.seeds < 1:
            raise ValueError("T, T_prime and seeds must be >= 1")
        if self.planner not in ("exact", "sga"):
            raise ValueError(f"unknown planner {self.planner!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        self.lambdas = [float(x) for x in self.lambdas]
        self.pis = [float(x) for x in self.pis]
        self.T_prime = [int(x) for x in self.T_prime]

    @property
    def seed_list(self) -> list:
        return [self.base_seed + i for i in range(self.seeds)]

    def schedule(self) -> ScheduleSpec:
        base = _DEFAULT_SCHEDULE.get(self.experiment, ScheduleSpec())
        return ScheduleSpec(
            beta=self.beta_rule or base.beta,
            alpha=self.alpha_rule or base.alpha,
            beta_value=base.beta_value,
            alpha_value=base.alpha_value,
        )

    def mdp(self):
        mdp = build_environment(self.environment, self.p, self.escape, self.env_path)
        if mdp.gamma != self.gamma and self.environment != "custom":
            mdp = type(mdp)(mdp.transition, mdp.reward, self.gamma)
        return mdp

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


@lru_cache(maxsize=None)
def _reference(environment, env_path, p, escape, gamma, lam):
    cfg = ExperimentConfig("connection", environment, env_path, p, escape, gamma)
    mdp = cfg.mdp()
    res = robust_value_iteration(mdp, RobustSpec.penalized(lam, mdp.gamma), tol=1e-10)
    return res.v_star, res.q_star


def reference_solution(cfg: ExperimentConfig, lam: float):
    """Cached (V*, Q*) of the penalized robust problem on the true model."""
    return _reference(cfg.environment, cfg.env_path, cfg.p, cfg.escape, cfg.gamma, float(lam))


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _manifest(cfg: ExperimentConfig, out: Path, outputs, extra=None) -> dict:
    lambdas = cfg.lambdas if cfg.experiment != "rho_lambda_bridge" else []
    manifest = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "library_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "derived_constants": {repr(lam): RobustSpec.penalized(lam, cfg.gamma).to_dict() for lam in lambdas},
        "outputs": sorted(str(Path(o).relative_to(out)) for o in outputs),
    }
    if cfg.experiment in _DEFAULT_SCHEDULE:
        manifest["schedule"] = cfg.schedule().to_dict()
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def run_connection_sweep(cfg: ExperimentConfig) -> Path:
    """Deviation ||V*_rob,p - V*||_inf for every lambda, plus the lambda -> 0 limit."""
    out = Path(cfg.out)
    mdp = cfg.mdp()
    v_nominal = non_robust_values(mdp)
    v_zero = min_value_iteration(mdp)
    rows = []
    for lam in cfg.lambdas:
        v_rob, _ = reference_solution(cfg, lam)
        rows.append((lam, float(np.max(np.abs(v_rob - v_nominal)))))
    path = out / "connection.csv"
    _write_rows(path, ["lambda", "deviation"], rows)
    _manifest(cfg, out, [path], {"lambda_zero_deviation": float(np.max(np.abs(v_nominal - v_zero)))})
    return path


def _stat_error_job(cfg_dict, lam, n, seed):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    mdp = cfg.mdp()
    v_ref, _ = reference_solution(cfg, lam)
    p_hat = estimate_empirical_model(GenerativeModel(mdp, seed), n)
    spec = RobustSpec.penalized(lam, mdp.gamma)
    if cfg.planner == "exact":
        res = robust_value_iteration(p_hat, spec, tol=1e-10)
    else:
        res = robust_value_iteration(p_hat, spec, mode="sga", T=100, inner_steps=100, tol=0.0)
    return (lam, n, seed, float(np.max(np.abs(res.v_star - v_ref))), cfg.planner)


def run_stat_error(cfg: ExperimentConfig) -> Path:
    """Plug-in model error ||V_hat - V*_rob,p||_inf over (lambda, n, seed)."""
    out = Path(cfg.out)
    jobs = [(cfg.to_dict(), lam, n, seed) for lam in cfg.lambdas for n in cfg.n_list for seed in cfg.seed_list]
    rows = _map(_stat_error_job, jobs, cfg.workers)
    runs = out / "stat_error_runs.csv"
    _write_rows(runs, ["lambda", "n", "seed", "deviation", "planner"], rows)
    agg = []
    table = _read_rows(runs)
    for lam in cfg.lambdas:
        for n in cfg.n_list:
            dev = np.array([float(r["deviation"]) for r in table if float(r["lambda"]) == lam and int(r["n"]) == n])
            agg.append((lam, n, float(dev.mean()), float(dev.std()), *_bands(dev)))
    summary = out / "stat_error.csv"
    _write_rows(summary, ["lambda", "n", "mean", "std", "median", "p2_5", "p97_5"], agg)
    _manifest(cfg, out, [runs, summary])
    return summary


def _bands(x) -> tuple:
    return tuple(float(q) for q in np.percentile(x, [50.0, 2.5, 97.5]))


def _aggregate_runs(files, out_path: Path) -> None:
    """Median and 95% band per logged row, read back from per-run CSV files."""
    tables = [_read_rows(Path(f)) for f in files]
    samples = [int(r["samples"]) for r in tables[0]]
    errors = np.array([[float(r["sup_error"]) for r in t] for t in tables])
    gaps = np.array([[float(r["dual_gap"]) for r in t] for t in tables])
    rows = []
    for j, n in enumerate(samples):
        rows.append((n, *_bands(errors[:, j]), float(np.median(gaps[:, j]))))
    _write_rows(out_path, ["samples", "median", "p2_5", "p97_5", "median_dual_gap"], rows)


def _generative_job(cfg_dict, lam, t_prime, seed):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    mdp = cfg.mdp()
    _, q_ref = reference_solution(cfg, lam)
    rec = robust_q_generative(
        GenerativeModel(mdp, seed), RobustSpec.penalized(lam, mdp.gamma), cfg.T, t_prime, cfg.schedule(), q_ref
    )
    path = Path(cfg.out) / "generative" / f"Tprime_{t_prime}" / f"{rec.file_stem}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rec.to_csv())
    return str(path), rec.theta_violations


def run_generative_convergence(cfg: ExperimentConfig) -> Path:
    """Generative-model Q-learning over lambda x T' x seeds."""
    out = Path(cfg.out)
    jobs = [(cfg.to_dict(), lam, tp, seed) for lam in cfg.lambdas for tp in cfg.T_prime for seed in cfg.seed_list]
    results = _map(_generative_job, jobs, cfg.workers)
    outputs = [r[0] for r in results]
    for lam in cfg.lambdas:
        for tp in cfg.T_prime:
            files = [out / "generative" / f"Tprime_{tp}" / f"generative_{lam:g}_{s}.csv" for s in cfg.seed_list]
            agg = out / "generative" / f"aggregate_{lam:g}_Tprime_{tp}.csv"
            _aggregate_runs(files, agg)
            outputs.append(agg)
    _manifest(cfg, out, outputs, {"theta_violations": int(sum(r[1] for r in results))})
    return out / "generative"


def _markovian_job(cfg_dict, lam, pi, seed):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    mdp = cfg.mdp()
    _, q_ref = reference_solution(cfg, lam)
    src = TrajectorySource(mdp, behavior_policy(pi, mdp.n_states), seed=seed)
    path = Path(cfg.out) / "markovian" / f"pi_{pi:g}" / f"markovian_{lam:g}_{seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        rec = robust_q_markovian(
            src, RobustSpec.penalized(lam, mdp.gamma), cfg.T, cfg.schedule(), q_ref, log_every=cfg.log_every
        )
    except DivergedError as err:
        return str(path), 0, str(err)
    path.write_text(rec.to_csv())
    return str(path), rec.theta_violations, None


def run_markovian_convergence(cfg: ExperimentConfig) -> Path:
    """Single-trajectory Q-learning over lambda x pi x seeds, with chain diagnostics per pi."""
    out = Path(cfg.out)
    mdp = cfg.mdp()
    diagnostics = {}
    for pi in cfg.pis:
        try:
            diag = stationary_distribution(mdp, behavior_policy(pi, mdp.n_states))
        except ChainError as err:
            raise ValueError(f"behavior pi={pi} is not usable: {err}") from err
        diagnostics[repr(pi)] = diag.to_dict()
        path = out / "markovian" / f"diagnostics_pi_{pi:g}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(diag.to_dict(), indent=2))
    jobs = [(cfg.to_dict(), lam, pi, seed) for lam in cfg.lambdas for pi in cfg.pis for seed in cfg.seed_list]
    results = _map(_markovian_job, jobs, cfg.workers)
    outputs = [r[0] for r in results if r[2] is None]
    outputs += [out / "markovian" / f"diagnostics_pi_{pi:g}.json" for pi in cfg.pis]
    failures = {r[0]: r[2] for r in results if r[2] is not None}
    stability = {}
    for lam in cfg.lambdas:
        for pi in cfg.pis:
            files = [out / "markovian" / f"pi_{pi:g}" / f"markovian_{lam:g}_{s}.csv" for s in cfg.seed_list]
            done = [f for f in files if str(f) not in failures]
            key = f"lambda={lam:g},pi={pi:g}"
            if not done:
                stability[key] = {"unstable": True, "diverged": len(files)}
                continue
            agg = out / "markovian" / f"aggregate_{lam:g}_pi_{pi:g}.csv"
            _aggregate_runs(done, agg)
            outputs.append(agg)
            stability[key] = _stability(agg, len(files) - len(done))
    _manifest(
        cfg,
        out,
        outputs,
        {
            "chain_diagnostics": {k: {"d_min": d["d_min"], "d_max": d["d_max"]} for k, d in diagnostics.items()},
            "stability": stability,
            "failures": failures,
            "theta_violations": int(sum(r[1] for r in results)),
        },
    )
    return out / "markovian"


def _stability(agg_path: Path, diverged: int) -> dict:
    rows = _read_rows(agg_path)
    final = float(rows[-1]["median"])
    decade = float(rows[max(0, len(rows) // 10 - 1)]["median"])
    ratio = final / decade if decade > 0 else 0.0
    return {"unstable": bool(diverged > 0 or ratio >= STABLE_RATIO), "diverged": diverged, "last_decade_ratio": ratio}


def rho_lambda_bridge(cfg: ExperimentConfig) -> Path:
    """Calibrated penalty for each constraint radius and the round-trip value gap."""
    out = Path(cfg.out)
    mdp = cfg.mdp()
    template = RobustSpec.penalized(1.0, mdp.gamma)
    rows, failures = [], {}
    for rho in cfg.rhos:
        try:
            cal = calibrate_lambda_for_rho(mdp, template, rho)
        except CalibrationError as err:
            failures[repr(rho)] = str(err)
            continue
        rows.append((float(rho), cal.lam, cal.value_constrained, cal.value_penalized, cal.gap, cal.evaluations))
    path = out / "rho_lambda_bridge.csv"
    _write_rows(path, ["rho", "lambda", "value_constrained", "value_penalized", "gap", "evaluations"], rows)
    _manifest(cfg, out, [path], {"failures": failures})
    return path


RUNNERS = {
    "connection": run_connection_sweep,
    "stat_error": run_stat_error,
    "generative_convergence": run_generative_convergence,
    "markovian_convergence": run_markovian_convergence,
    "rho_lambda_bridge": rho_lambda_bridge,
}


def run_experiment(cfg: ExperimentConfig) -> Path:
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg.experiment](cfg)
