"""Command-line interface.

Subcommands:
  gen                      materialize the dataset described by a config
  train                    run the full experiment pipeline for one regime
  eval                     recompute metrics from a run's checkpoints
  report                   render plots and a markdown summary for a run
  compare                  multi-run comparison table (CSV + markdown)
  reproduce-paper-metrics  regression-check the fairness arithmetic
                           against the published reference tables

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, FairsegError
from .experiment import (
    ExperimentConfig,
    compare_runs,
    evaluate_run,
    render_run,
    run_experiment,
)
from .phantom import build_dataset
from .reference_tables import verify_published_arithmetic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(p: argparse.ArgumentParser, config: bool = True, out_required: bool = True):
    if config:
        p.add_argument("--config", required=True, type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=out_required, type=Path, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset from a config")
    _add_common(p)

    p = sub.add_parser("train", help="run one experiment (generate, train, evaluate, report)")
    _add_common(p)
    p.add_argument("--regime", default=None, help="override the config regime")

    p = sub.add_parser("eval", help="recompute metrics from a finished run")
    p.add_argument("--run", required=True, type=Path, help="run directory holding report.json")
    p.add_argument("--data", type=Path, default=None, help="dataset directory override")
    p.add_argument("--alpha", type=float, default=None, help="significance level override")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: run dir)")

    p = sub.add_parser("report", help="render plots and markdown summary for a run")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("compare", help="side-by-side fairness table over runs")
    p.add_argument("reports", nargs="+", type=Path, help="report.json files or run dirs")
    p.add_argument("--out", type=Path, default=None, help="directory for comparison.csv/.md")

    sub.add_parser(
        "reproduce-paper-metrics",
        help="recompute the published tables' Avg/SD/SER columns from their printed cells",
    )
    return parser


def _cmd_gen(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    manifest = build_dataset(config.dataset_spec(), args.out)
    print(f"dataset: {manifest.n_subjects} subjects, groups {manifest.group_counts()}, "
          f"splits {manifest.split_counts()} -> {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seed is not None or args.regime is not None:
        config = config.with_overrides(seed=args.seed, regime=args.regime)
    report = run_experiment(config, args.out)
    g = report["metrics"]["group"]
    print(f"run complete: regime={report['regime']} seed={report['seed']}")
    print(f"  avg DSC {g['average']:.2f}  SD {g['sd']:.3f}  SER {g['ser']}")
    print(f"  report: {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate_run(args.run, data_dir=args.data, alpha=args.alpha, out_dir=args.out)
    g = report["metrics"]["group"]
    print(f"eval: avg DSC {g['average']:.2f}  SD {g['sd']:.3f}  SER {g['ser']}")
    return EXIT_OK


def _cmd_report(args) -> int:
    paths = render_run(args.run, out_dir=args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    table = compare_runs(args.reports)
    print(table.to_markdown(), end="")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "comparison.csv")
        (out / "comparison.md").write_text(table.to_markdown(), encoding="utf-8")
        print(f"wrote {out / 'comparison.csv'} and {out / 'comparison.md'}")
    return EXIT_OK


def _cmd_reproduce(_args) -> int:
    lines = verify_published_arithmetic()
    failed = 0
    for line in lines:
        print(line.render())
        if line.asserted and not line.ok:
            failed += 1
    if failed:
        print(f"{failed} asserted check(s) failed")
        return EXIT_RUNTIME
    print(f"all {sum(1 for l in lines if l.asserted)} asserted checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "report": _cmd_report,
        "compare": _cmd_compare,
        "reproduce-paper-metrics": _cmd_reproduce,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FairsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
