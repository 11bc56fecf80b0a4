"""Command line entry point: ``robust-mdp run <experiment> [options]``."""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-mdp", description="Penalized robust MDP experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write CSVs plus manifest.json")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", help="JSON file mirroring ExperimentConfig; flags override it")
    run.add_argument("--env", dest="environment", choices=["chain10_absorbing", "chain10_recurrent", "custom"])
    run.add_argument("--env-path", help="MDP JSON file for --env custom")
    run.add_argument("--lambda", dest="lambdas", type=float, nargs="+", metavar="LAM")
    run.add_argument("--pi", dest="pis", type=float, nargs="+", metavar="PI")
    run.add_argument("--rho", dest="rhos", type=float, nargs="+", metavar="RHO")
    run.add_argument("--n", dest="n_list", type=int, nargs="+", metavar="N", help="sample sizes for stat_error")
    run.add_argument("--T", type=int)
    run.add_argument("--Tprime", dest="T_prime", type=int, nargs="+")
    run.add_argument("--seeds", type=int, help="number of seeds")
    run.add_argument("--base-seed", type=int)
    run.add_argument("--p", type=float, help="chain slip probability")
    run.add_argument("--escape", type=float, help="return probability of the recurrent chain")
    run.add_argument("--gamma", type=float)
    run.add_argument("--planner", choices=["exact", "sga"])
    run.add_argument("--beta-rule", choices=["theory", "experimental", "constant", "markov"])
    run.add_argument("--alpha-rule", choices=["theory", "lambda_sqrt", "constant", "markov"])
    run.add_argument("--log-every", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--out")
    return parser


_FIELDS = (
    "environment", "env_path", "lambdas", "pis", "rhos", "n_list", "T", "T_prime", "seeds", "base_seed",
    "p", "escape", "gamma", "planner", "beta_rule", "alpha_rule", "log_every", "workers", "out",
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in _FIELDS}
    try:
        if args.config:
            cfg = ExperimentConfig.load(args.config, experiment=args.experiment, **overrides)
        else:
            cfg = ExperimentConfig(args.experiment, **{k: v for k, v in overrides.items() if v is not None})
        result = run_experiment(cfg)
    except (ValueError, FileNotFoundError) as err:
        print(f"robust-mdp: error: {err}", file=sys.stderr)
        return 2
    print(json.dumps({"experiment": cfg.experiment, "output": str(result), "out": cfg.out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
