"""Acceptance gates. Each test prints one PASS/FAIL line, repeated in the summary."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from robust_mdp.bellman import apply_penalized_operator_v, non_robust_values, robust_value_iteration
from robust_mdp.divergence import DivergenceKind, RobustSpec, dual_objective_expected, f_conjugate, f_conjugate_grad
from robust_mdp.dro import sga_solve, solve_constrained_exact, solve_penalized_exact, solve_penalized_primal_oracle
from robust_mdp.harness.envs import behavior_policy, build_chain10
from robust_mdp.harness.experiments import ExperimentConfig, reference_solution, run_experiment
from robust_mdp.learn import robust_q_generative, robust_q_markovian
from robust_mdp.samplers import GenerativeModel, TrajectorySource

from conftest import ACCEPTANCE_LINES, random_mdp


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


@pytest.fixture(scope="module")
def generative_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("generative")
    cfg = ExperimentConfig(
        "generative_convergence", lambdas=[10.0], T=1000, T_prime=[10, 50, 100], seeds=20, out=str(out)
    )
    start = time.perf_counter()
    run_experiment(cfg)
    return cfg, out, time.perf_counter() - start


@pytest.fixture(scope="module")
def markovian_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("markovian")
    cfg = ExperimentConfig(
        "markovian_convergence", lambdas=[5.0], pis=[0.5, 0.001], T=10**6, seeds=10, out=str(out)
    )
    start = time.perf_counter()
    run_experiment(cfg)
    return cfg, out, time.perf_counter() - start


def test_criterion_01_dual_matches_primal():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        lam = (0.5, 1.0, 2.0, 10.0)[i % 4]
        spec = RobustSpec.penalized(lam, 0.9)
        k = int(rng.integers(1, 5))
        p = rng.dirichlet(np.ones(k))
        v = rng.uniform(0, spec.v_max, k)
        worst = max(worst, abs(solve_penalized_exact(spec, p, v).value - solve_penalized_primal_oracle(spec, p, v)))
    elapsed = time.perf_counter() - start
    report(1, worst <= 1e-4 and elapsed < 10, f"max |dual - primal| = {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 10s)")


def test_criterion_02_hand_derived_values():
    p, v = np.array([0.5, 0.5]), np.array([0.0, 1.0])
    pen = solve_penalized_exact(RobustSpec.penalized(1.0, 0.9), p, v).value
    con = solve_constrained_exact(RobustSpec.constrained(0.25, 0.9), p, v).value
    ok = abs(pen - 0.4375) <= 1e-6 and abs(con - 0.25) <= 1e-6
    report(2, ok, f"penalized {pen:.9f} (0.4375), constrained {con:.9f} (0.25), tol 1e-6")


def test_criterion_03_contraction():
    rng = np.random.default_rng(7)
    worst = -np.inf
    for i in range(100):
        mdp = random_mdp(rng, 8, 3, sparsity=0.3 if i % 2 else 0.0)
        spec = RobustSpec.penalized((0.1, 1.0, 10.0, 100.0)[i % 4], mdp.gamma)
        v1, v2 = rng.uniform(0, mdp.v_max, (2, 8))
        lhs = np.max(np.abs(apply_penalized_operator_v(mdp, spec, v1) - apply_penalized_operator_v(mdp, spec, v2)))
        worst = max(worst, lhs - mdp.gamma * np.max(np.abs(v1 - v2)))
    report(3, worst <= 1e-10, f"max(||Tv1-Tv2|| - gamma||v1-v2||) = {worst:.2e} over 100 pairs (<= 1e-10)")


def test_criterion_04_fixed_point_planning():
    mdp = build_chain10("absorbing", p=0.9)
    res = robust_value_iteration(mdp, RobustSpec.penalized(1.0, 0.9), T=400, tol=1e-9)
    above = float(np.max(res.v_star - non_robust_values(mdp)))
    ok = res.converged and res.residual <= 1e-9 and res.iterations <= 400 and res.v_star[-1] == 0.0 and above <= 1e-9
    report(
        4,
        ok,
        f"residual {res.residual:.1e} after {res.iterations} sweeps (<= 400), V(s10) = {res.v_star[-1]!r}, "
        f"max(V_rob - V_nominal) = {above:.1e}",
    )


def test_criterion_05_rho_lambda_bridge(tmp_path):
    cfg = ExperimentConfig("rho_lambda_bridge", rhos=[0.05, 0.1, 0.5], out=str(tmp_path))
    start = time.perf_counter()
    rows = read_csv(run_experiment(cfg))
    elapsed = time.perf_counter() - start
    gaps = [float(r["gap"]) for r in rows]
    ok = len(rows) == 3 and max(gaps) <= 1e-4 and elapsed < 60
    detail = ", ".join(f"rho={r['rho']} lam={float(r['lambda']):.4g} gap={float(r['gap']):.1e}" for r in rows)
    report(5, ok, f"{detail}; {elapsed:.1f}s (< 60s)")


def test_criterion_06_connection_trend(tmp_path):
    cfg = ExperimentConfig("connection", lambdas=[0.5, 1, 2, 3, 4, 5, 10, 1e6], out=str(tmp_path))
    dev = [float(r["deviation"]) for r in read_csv(run_experiment(cfg))]
    ok = all(a >= b for a, b in zip(dev[:7], dev[1:7])) and dev[-1] <= 1e-2
    report(6, ok, f"deviations {[round(d, 4) for d in dev[:7]]} non-increasing, {dev[-1]:.1e} at lambda=1e6 (<= 1e-2)")


def test_criterion_07_statistical_scaling(tmp_path):
    cfg = ExperimentConfig("stat_error", lambdas=[1.0], n_list=[250, 4000], seeds=20, out=str(tmp_path))
    start = time.perf_counter()
    rows = read_csv(run_experiment(cfg))
    elapsed = time.perf_counter() - start
    small, big = float(rows[0]["mean"]), float(rows[1]["mean"])
    ok = big <= 0.75 * small and elapsed < 300
    report(7, ok, f"mean err n=250 {small:.4f}, n=4000 {big:.4f}, ratio {big / small:.3f} (<= 0.75); {elapsed:.1f}s")


def test_criterion_08_sga_rate():
    spec = RobustSpec.penalized(1.0, 0.9)
    p, v = np.array([0.5, 0.5]), np.array([0.0, 1.0])
    T = 10**5
    best = solve_penalized_exact(spec, p, v).value
    gaps = []
    for seed in range(20):
        stream = iter(np.random.default_rng(seed).choice(2, size=T, p=p))
        eta = sga_solve(spec, stream, v, T)
        gaps.append(best - dual_objective_expected(spec, eta, p, v))
    bound = 5 * spec.diam * spec.c_g * (2 + np.log(T)) / np.sqrt(T)
    report(8, np.mean(gaps) <= bound, f"mean gap {np.mean(gaps):.2e} <= bound {bound:.2f}")


@pytest.mark.slow
def test_criterion_09_generative_convergence(generative_runs):
    cfg, out, elapsed = generative_runs
    medians, early = {}, None
    for tp in (10, 50, 100):
        agg = read_csv(out / "generative" / f"aggregate_10_Tprime_{tp}.csv")
        medians[tp] = float(agg[-1]["median"])
        if tp == 100:
            early = float(agg[9]["median"])
    decay = medians[100] <= 0.25 * early
    ordered = medians[100] <= medians[50] <= medians[10]
    ok = decay and ordered and elapsed < 600
    report(
        9,
        ok,
        f"T'=100 median error t=10 {early:.3f} -> final {medians[100]:.4f} (decay {'ok' if decay else 'FAILED'}); "
        f"final medians T'=10/50/100 = {medians[10]:.4f}/{medians[50]:.4f}/{medians[100]:.4f} "
        f"(ordering {'ok' if ordered else 'FAILED'}); {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_10_markovian_convergence(markovian_runs):
    cfg, out, elapsed = markovian_runs
    agg = {pi: read_csv(out / "markovian" / f"aggregate_5_pi_{pi:g}.csv") for pi in (0.5, 0.001)}
    rows = agg[0.5]
    at_tenth = next(float(r["median"]) for r in rows if int(r["samples"]) == 10**5)
    final = float(rows[-1]["median"])
    final_low = float(agg[0.001][-1]["median"])
    ok = int(rows[-1]["samples"]) == 10**6 and final <= 0.5 * at_tenth and final < final_low and elapsed < 900
    report(
        10,
        ok,
        f"pi=0.5 median err T/10 {at_tenth:.4f} -> T {final:.4f} (<= 0.5x); pi=0.001 final {final_low:.3f}; {elapsed:.0f}s",
    )


@pytest.mark.slow
def test_criterion_11_numerics(generative_runs, markovian_runs):
    s = np.linspace(-20, 20, 40001)
    s = s[np.abs(s + 2.0) > 1e-3]
    h = 1e-6
    fd = (f_conjugate(DivergenceKind.CHI_SQUARE, s + h) - f_conjugate(DivergenceKind.CHI_SQUARE, s - h)) / (2 * h)
    grad_err = float(np.max(np.abs(f_conjugate_grad(DivergenceKind.CHI_SQUARE, s) - fd)))
    violations = 0
    for _, out, _ in (generative_runs, markovian_runs):
        violations += json.loads((out / "manifest.json").read_text())["theta_violations"]
    spec = RobustSpec.penalized(0.5, 0.9)
    trace = []
    sga_solve(spec, iter(np.random.default_rng(0).integers(0, 2, 10**4)), np.array([0.0, 10.0]), 10**4, trace=trace)
    trace = np.array(trace)
    violations += int(np.sum((trace < spec.theta_lo) | (trace > spec.theta_hi)))
    ok = grad_err <= 1e-4 and violations == 0
    report(11, ok, f"max |grad - finite difference| = {grad_err:.1e} (<= 1e-4); Theta violations = {violations}")


@pytest.mark.slow
def test_criterion_12_reproducibility(generative_runs, markovian_runs):
    gcfg, gout, _ = generative_runs
    mcfg, mout, _ = markovian_runs
    mdp = gcfg.mdp()
    _, q_ref = reference_solution(gcfg, 10.0)
    gen = robust_q_generative(GenerativeModel(mdp, 7), RobustSpec.penalized(10.0, 0.9), 1000, 50, gcfg.schedule(), q_ref)
    gen_same = gen.to_csv().encode() == (gout / "generative" / "Tprime_50" / "generative_10_7.csv").read_bytes()
    mdp = mcfg.mdp()
    _, q_ref = reference_solution(mcfg, 5.0)
    src = TrajectorySource(mdp, behavior_policy(0.5), seed=3)
    mar = robust_q_markovian(src, RobustSpec.penalized(5.0, 0.9), 10**6, mcfg.schedule(), q_ref)
    mar_same = mar.to_csv().encode() == (mout / "markovian" / "pi_0.5" / "markovian_5_3.csv").read_bytes()
    report(12, gen_same and mar_same, f"generative seed 7 identical: {gen_same}; markovian seed 3 identical: {mar_same}")
