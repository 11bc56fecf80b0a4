"""Environments and experiment drivers for the chain studies."""

from .envs import behavior_policy, build_chain10, build_environment
from .experiments import (
    ExperimentConfig,
    rho_lambda_bridge,
    run_connection_sweep,
    run_experiment,
    run_generative_convergence,
    run_markovian_convergence,
    run_stat_error,
)
