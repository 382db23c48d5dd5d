"""Sequential, reverse and random layer order on the skewed partition.

Prints per-order mean accuracy and the paired sequential-minus-reverse gap
with its standard error over seeds.
"""

import argparse
import dataclasses
import math
import statistics

from snakesim import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--cycles", type=int)
    ap.add_argument("--kd", choices=("auto", "on", "off"))
    args = ap.parse_args()

    cfg = experiments.load_config(args.config)
    trainer = cfg.trainer if args.kd is None else dataclasses.replace(cfg.trainer, kd=args.kd)
    snake = cfg.snake if args.cycles is None else dataclasses.replace(cfg.snake, cycles=args.cycles)
    cfg = dataclasses.replace(cfg, frameworks=["snake"], partitions=["dirichlet"], epochs=[args.epochs],
                              order_modes=["sequential", "reverse", "random"], seeds=list(range(args.seeds)),
                              trainer=trainer, snake=snake)
    reports = experiments.run_matrix(cfg).reports
    acc = {m: {r.cell.seed: r.final_accuracy for r in reports if r.cell.order_mode == m} for m in cfg.order_modes}
    for m, by_seed in acc.items():
        print(f"{m:10s} {statistics.fmean(by_seed.values()):.4f}")
    diff = [acc["sequential"][s] - acc["reverse"][s] for s in cfg.seeds]
    se = statistics.stdev(diff) / math.sqrt(len(diff)) if len(diff) > 1 else float("nan")
    print(f"sequential - reverse: {statistics.fmean(diff):+.4f} (se {se:.4f})")


if __name__ == "__main__":
    main()
