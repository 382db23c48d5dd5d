"""Accuracy against cumulative FLOPs for snake, FedAvg and the aux-head split baseline.

Writes one row per evaluation point, ready for any plotting tool.
"""

import argparse
import dataclasses
from pathlib import Path

from snakesim import accounting, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--epochs", type=int, nargs="+", default=[1, 5])
    ap.add_argument("--out", default="runs/curves")
    args = ap.parse_args()

    cfg = experiments.load_config(args.config)
    cfg = dataclasses.replace(cfg, frameworks=["snake", "fedavg", "accel_fl"], order_modes=["sequential"],
                              epochs=args.epochs)
    res = experiments.run_matrix(cfg, Path(args.out), check=True)
    for name, ok, detail in res.checks:
        if not name.startswith("reconcile"):
            print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    print(res.aggregate_csv, end="")
    rows = experiments.summary_rows(res.reports)
    Path(args.out, "curves.csv").write_text(accounting.summary_csv(rows, experiments.EXTRA_COLUMNS))


if __name__ == "__main__":
    main()
