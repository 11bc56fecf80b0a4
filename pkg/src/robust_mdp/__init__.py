"""Penalized f-divergence robust MDPs: exact planning, stochastic dual solvers and
robust Q-learning from generative or single-trajectory data."""

__version__ = "0.1.0"

from .bellman import (
    Calibration,
    CalibrationError,
    RobustPlanResult,
    apply_constrained_operator_v,
    apply_penalized_operator_q,
    apply_penalized_operator_v,
    calibrate_lambda_for_rho,
    constrained_value_iteration,
    min_value_iteration,
    robust_value_iteration,
)
from .divergence import DivergenceKind, RobustSpec, divergence, f_conjugate, f_conjugate_grad, f_value
from .dro import (
    DroSolution,
    sga_solve,
    solve_constrained_exact,
    solve_penalized_exact,
    solve_penalized_primal_oracle,
)
from .learn import RunRecord, ScheduleSpec, robust_q_generative, robust_q_markovian, sup_error
from .mdp import ConvergenceError, TabularMdp, load_mdp, save_mdp, standard_value_iteration
from .samplers import (
    ChainDiagnostics,
    ChainError,
    GenerativeModel,
    TrajectorySource,
    estimate_empirical_model,
    stationary_distribution,
    step_trajectory,
)
