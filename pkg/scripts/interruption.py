"""Node failure with an idle spare versus the uninterrupted run, per seed."""

import argparse
import csv
import dataclasses
import statistics
import sys

from snakesim import experiments
from snakesim.experiments import FailureEntry, NodeSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--cycle", type=int, default=1)
    ap.add_argument("--layer", type=int, default=5)
    ap.add_argument("--at", type=float, default=0.5, help="fraction of the local run completed at failure")
    ap.add_argument("--spares", type=int, default=1)
    args = ap.parse_args()

    cfg = experiments.load_config(args.config)
    cfg = dataclasses.replace(cfg, frameworks=["snake"], order_modes=["sequential"], epochs=[cfg.epochs[0]],
                              seeds=list(range(args.seeds)),
                              nodes=NodeSpec(count=cfg.nodes.count, spares=args.spares))
    hit_cfg = dataclasses.replace(cfg, failures=[FailureEntry(args.cycle, args.layer, args.at)])
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["partition", "seed", "clean_accuracy", "interrupted_accuracy", "ratio", "removed", "skipped"])
    for part in cfg.partitions:
        clean = experiments.run_matrix(dataclasses.replace(cfg, partitions=[part])).reports
        hit = experiments.run_matrix(dataclasses.replace(hit_cfg, partitions=[part])).reports
        for a, b in zip(clean, hit):
            out.writerow([part, a.cell.seed, a.final_accuracy, b.final_accuracy, b.final_accuracy / a.final_accuracy,
                          len(b.trace.removed), len(b.trace.skipped)])
        ratio = statistics.fmean(r.final_accuracy for r in hit) / statistics.fmean(r.final_accuracy for r in clean)
        print(f"# {part}: mean interrupted / clean = {ratio:.4f}", file=sys.stderr)


if __name__ == "__main__":
    main()
