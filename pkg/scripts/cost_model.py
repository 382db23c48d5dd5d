"""Per-hop communication, FLOP and memory ratios from the accounting formulas."""

import argparse

from snakesim import accounting, nncore


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--layers", type=int, default=11)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()

    g = nncore.mlp_graph(args.dim, args.hidden, args.classes, args.layers)
    n = g.n_param_layers
    counts = g.param_counts()
    full = list(range(1, n + 1))
    fd, fu = accounting.fedavg_round_bytes(g.total_params())
    print(f"params {g.total_params()}, fedavg bytes per node-round {fd + fu}")
    print("layer  updated%  bytes_ratio  bwd_flop_ratio  mem_ratio(adam,q8)")
    f_full = accounting.flop_estimate(g, args.batch, full)
    m_full = accounting.peak_memory_estimate(g, full, args.batch, "adam", False)
    for mid in g.middle_layers:
        upd = [1, mid, n]
        down, up = accounting.snake_hop_bytes(counts, upd)
        f = accounting.flop_estimate(g, args.batch, upd)
        m = accounting.peak_memory_estimate(g, upd, args.batch, "adam", True)
        frac = sum(counts[i - 1] for i in upd) / g.total_params()
        print(f"{mid:5d}  {frac:8.2%}  {(down + up) / (fd + fu):11.4f}  "
              f"{(f.bwd_act + f.bwd_w) / (f_full.bwd_act + f_full.bwd_w):14.4f}  {m / m_full:.4f}")


if __name__ == "__main__":
    main()
