"""Command-line experiment runner.

Subcommands: convergence, toy, regression, classification, intervals run the
corresponding experiment from a flat key-value config file; tune re-fits the
variance scale of a saved ensemble on a validation CSV; report pretty-prints
a written report or the configuration defaults.

Exit codes: 0 success, 2 config error, 3 numerical abort, 4 IO error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import load_csv
from .experiments import defaults_reference, run_experiment
from .linearize import load_ensemble
from .ntk import BudgetExceededError, FactorizationError
from .report import report_read
from .training import TrainingDivergedError
from .tuning import TernaryConfig, tune_gamma

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

SUBCOMMAND_KINDS = {
    "convergence": "convergence",
    "toy": "toy",
    "regression": "regression_csv",
    "classification": "classification_blobs",
    "intervals": "intervals",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nuqls",
        description="Linearized-ensemble uncertainty quantification experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_KINDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="flat key-value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers for independent realizations")
        p.add_argument("--out", help="output directory")

    t = sub.add_parser("tune", help="re-fit the variance scale of a saved ensemble")
    t.add_argument("--ensemble", required=True, help="ensemble .npz container")
    t.add_argument("--csv", required=True,
                   help="validation CSV in the units the ensemble was trained on")
    t.add_argument("--targets", default="-1",
                   help="comma-separated target column indices")
    t.add_argument("--header", action="store_true")
    t.add_argument("--left", type=float, default=1e-3)
    t.add_argument("--right", type=float, default=10.0)

    r = sub.add_parser("report", help="inspect a written report")
    r.add_argument("--in", dest="path", help="report.json to pretty-print")
    r.add_argument("--defaults", action="store_true",
                   help="print the configuration defaults reference")
    return parser


def _run_experiment_command(args, kind: str) -> int:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config is for kind {cfg.kind!r}, "
                              f"but the {kind!r} subcommand was invoked")
    else:
        cfg = ExperimentConfig(kind=kind)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.workers = max(1, args.workers)
    report, path = run_experiment(cfg)
    print(f"report written to {path}")
    for name in sorted(report.get("metrics", {})):
        print(f"  {name} = {report['metrics'][name]:.6g}")
    return EXIT_OK


def _run_tune(args) -> int:
    lin, ens = load_ensemble(args.ensemble)
    targets = [int(v) for v in args.targets.split(",") if v.strip()]
    val = load_csv(args.csv, target_columns=targets, header=args.header)
    gamma_hat = tune_gamma(lin, ens, val, TernaryConfig(args.left, args.right))
    print(f"gamma_hat = {gamma_hat:.6g}")
    return EXIT_OK


def _run_report(args) -> int:
    if args.defaults:
        print(defaults_reference())
        return EXIT_OK
    if not args.path:
        raise ConfigError("report needs --in PATH or --defaults")
    report = report_read(args.path)
    print(f"kind: {report.get('kind')}  seed: {report.get('seed')}  "
          f"schema: {report.get('schema_version')}")
    for name in sorted(report.get("metrics", {})):
        print(f"  {name} = {report['metrics'][name]:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command in SUBCOMMAND_KINDS:
            return _run_experiment_command(args, SUBCOMMAND_KINDS[args.command])
        if args.command == "tune":
            return _run_tune(args)
        return _run_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, FactorizationError, BudgetExceededError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
