"""Command-line interface.

Subcommands: ``simulate`` (benchmark generators to CSV), ``induce``
(covariate-shift induction on a CSV), ``subgroup`` (subgroup split),
``run`` (replicated experiment from a JSON config), ``report`` (re-emit
a saved report), and ``gradcheck`` (finite-difference gradient audit).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .dataio import read_dataset_csv, read_json, write_split
from .errors import InputError, NumericalError
from .harness import ExperimentConfig, emit_report, report_from_dict, run_experiment
from .shift_induction import ShiftSpec, induce_shift, pick_predictive_vector, subgroup_split
from .subspace_search import gradient_check_report
from .synthetic import gen_example1, gen_example2

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftproj",
        description="Low-dimensional projections for importance-weighted learning "
        "under covariate shift.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic benchmark split")
    p.add_argument("example", choices=["example1", "example2"])
    p.add_argument("--n", type=int, default=150, help="training sample size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("induce", help="induce covariate shift on a CSV dataset")
    p.add_argument("--data", required=True, help="CSV with x0..x{D-1} and y columns")
    p.add_argument("--alpha", type=float, default=0.8, help="shift location in [0, 1]")
    p.add_argument("--c", type=float, default=0.1, help="acceptance width multiplier")
    p.add_argument("--vectors", type=int, default=100, help="candidate directions")
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("subgroup", help="recast a binary subgroup as covariate shift")
    p.add_argument("--data", required=True, help="CSV with x0.., y, and group columns")
    p.add_argument("--holdout-fraction", type=float, default=1.0 / 3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run a replicated experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output directory")

    p = sub.add_parser("report", help="re-emit CSV/SVG artifacts from report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--formats", default="json,csv,svg",
                   help="comma list drawn from json,csv,svg")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the hypergradient")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser


def _cmd_simulate(args) -> int:
    gen = gen_example1 if args.example == "example1" else gen_example2
    pair = gen(args.n, seed=args.seed)
    paths = write_split(args.out, pair, manifest={"generator": args.example,
                                                  "n": args.n, "seed": args.seed})
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def _cmd_induce(args) -> int:
    X, y, _ = read_dataset_csv(args.data)
    if y is None:
        raise InputError(f"{args.data} must carry a y column")
    spec = ShiftSpec(
        n_candidate_vectors=args.vectors,
        alpha=args.alpha,
        c=args.c,
        train_fraction=args.train_fraction,
        seed=args.seed,
    )
    vector = pick_predictive_vector(X, y, spec)
    pair = induce_shift(X, y, vector, spec)
    write_split(args.out, pair, manifest={"source": args.data})
    print(
        f"induced shift along {np.array2string(vector, precision=3)}: "
        f"{pair.n_train} train, {pair.n_test} test, {len(pair.y_te_holdout)} holdout"
    )
    return 0


def _cmd_subgroup(args) -> int:
    X, y, group = read_dataset_csv(args.data)
    if y is None or group is None:
        raise InputError(f"{args.data} must carry y and group columns")
    pair = subgroup_split(X, y, group, holdout_fraction=args.holdout_fraction,
                          seed=args.seed)
    write_split(args.out, pair, manifest={"source": args.data})
    print(f"subgroup split: {pair.n_train} train, {pair.n_test} test, "
          f"{len(pair.y_te_holdout)} holdout")
    return 0


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_json(args.config)
    out = args.out if args.out is not None else config.out_dir
    report = run_experiment(config, out_dir=out)
    for agg in report.aggregates:
        norm = "" if agg.norm_loss_mean is None else f"  norm={agg.norm_loss_mean:.3f}"
        print(
            f"{agg.method:>8s}  n={agg.n:<5d} loss={agg.loss_mean:.4f} "
            f"(std {agg.loss_std:.4f})  ess={agg.ess_mean:.1f}{norm}"
        )
    if out is not None:
        print(f"artifacts written to {out}")
    return 0


def _cmd_report(args) -> int:
    body = read_json(args.report)
    report = report_from_dict(body)
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    bad = set(formats) - {"json", "csv", "svg"}
    if bad:
        raise InputError(f"unknown report formats: {sorted(bad)}")
    files = emit_report(report, args.out, formats=formats)
    for name, path in sorted(files.items()):
        print(f"{name}: {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradient_check_report(n_instances=args.instances, base_seed=args.seed)
    print(f"max relative gradient error over {args.instances} instances: "
          f"{report.max_rel_error:.3e}")
    return 0 if report.max_rel_error <= args.tol else 1


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "simulate": _cmd_simulate,
        "induce": _cmd_induce,
        "subgroup": _cmd_subgroup,
        "run": _cmd_run,
        "report": _cmd_report,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
