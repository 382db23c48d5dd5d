"""``snakesim`` command line: run, validate, report."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import accounting, experiments

log = logging.getLogger("snakesim")


def _load(path: str, seed_override=None) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(path)
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seeds=[seed_override])
    return cfg


def cmd_validate(args) -> int:
    try:
        cfg = experiments.load_config(args.config)
    except experiments.ConfigError as exc:
        for issue in exc.issues:
            print(f"{args.config}: {issue}", file=sys.stderr)
        return 2
    print(experiments.dump_config(cfg), end="")
    return 0


def cmd_run(args) -> int:
    try:
        cfg = _load(args.config, args.seed_override)
    except experiments.ConfigError as exc:
        for issue in exc.issues:
            print(f"{args.config}: {issue}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.output)
    result = experiments.run_matrix(cfg, out, check=args.check)
    for key, err in sorted(result.failed.items()):
        log.error("cell %s failed: %s", key, err)
    for name, ok, detail in result.checks:
        if not ok or not name.startswith("reconcile"):
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    print(f"{len(result.reports)} runs written to {out}")
    return 0 if result.ok else 1


def cmd_report(args) -> int:
    reports = experiments.load_reports(args.runs)
    if args.format == "csv":
        sys.stdout.write(accounting.summary_csv(experiments.summary_rows(reports), experiments.EXTRA_COLUMNS))
    else:
        sys.stdout.write(experiments.aggregate_csv(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snakesim", description="Serpentine layer-wise training simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment matrix")
    run.add_argument("--config", required=True)
    run.add_argument("--seed-override", type=int)
    run.add_argument("--assert", dest="check", action="store_true",
                     help="fail unless snake reaches 95%% of FedAvg accuracy and all ledgers reconcile")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config file and echo it with defaults filled in")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("--runs", required=True)
    rep.add_argument("--format", choices=("csv", "aggregate"), default="csv")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
