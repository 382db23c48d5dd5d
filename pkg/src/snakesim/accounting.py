"""Analytical communication, compute and memory cost models.

Byte counts assume 4-byte parameters on the wire; headers and metadata are
left out of model-byte counts.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .errors import InputError
from .nncore import DENSE, LayerGraph

BYTES_FULL = 4
BYTES_QUANT = 1
OPTIMIZER_MULTIPLIER = {"sgd": 0, "adam": 2}

CS = "client-server"
P2P = "peer-to-peer"

SUMMARY_COLUMNS = ("framework", "seed", "round_or_cycle", "bytes_up_total", "bytes_down_total",
                   "flops_total", "peak_mem_bytes", "test_accuracy")


@dataclass(frozen=True)
class MemoryModel:
    bytes_full: int = BYTES_FULL
    bytes_quant: int = BYTES_QUANT
    activation_bytes: int = BYTES_FULL

    def optimizer_multiplier(self, optimizer: str) -> int:
        try:
            return OPTIMIZER_MULTIPLIER[optimizer]
        except KeyError:
            raise InputError(f"unknown optimizer {optimizer!r}") from None


def _updated_params(param_counts: Sequence[int], updated: Iterable[int]) -> int:
    upd = set(updated)
    if any(i < 1 or i > len(param_counts) for i in upd):
        raise InputError(f"updated layers {sorted(upd)} outside 1..{len(param_counts)}")
    return sum(param_counts[i - 1] for i in upd)


def snake_hop_bytes(param_counts: Sequence[int], updated: Iterable[int], cache_state: str = "cold",
                    mode: str = CS, prev_updated: Optional[Iterable[int]] = None) -> Tuple[int, int]:
    """(down, up) bytes for one snake hop.

    A warm peer-to-peer hop only downloads what the previous hop changed
    (``prev_updated``, defaulting to this hop's own updated set).
    """
    up = BYTES_FULL * _updated_params(param_counts, updated)
    if mode == P2P and cache_state == "warm":
        prev = updated if prev_updated is None else prev_updated
        return BYTES_FULL * _updated_params(param_counts, prev), up
    if mode not in (CS, P2P) or cache_state not in ("cold", "warm"):
        raise InputError(f"unknown mode/cache combination {mode!r}/{cache_state!r}")
    return BYTES_FULL * sum(param_counts), up


def fedavg_round_bytes(total_params: int) -> Tuple[int, int]:
    return BYTES_FULL * total_params, BYTES_FULL * total_params


def split_learning_bytes(samples: int, width: int, epochs: int) -> int:
    """Smashed-data volume: activations up plus gradients down, every epoch."""
    return 2 * samples * width * BYTES_FULL * epochs


class FlopEstimate(NamedTuple):
    fwd: int
    bwd_act: int
    bwd_w: int

    @property
    def total(self) -> int:
        return self.fwd + self.bwd_act + self.bwd_w


def flop_estimate(graph: LayerGraph, batch: int, updated: Iterable[int]) -> FlopEstimate:
    """Matmul FLOPs of one training step: 2*b*m*n per dense layer and pass.

    The input-adjacent layer never needs an activation gradient; weight
    gradients are counted only for updated layers.
    """
    upd = set(updated)
    fwd = bwd_act = bwd_w = 0
    k = 0
    for desc in graph.layers:
        if desc.kind != DENSE:
            continue
        k += 1
        cost = 2 * batch * desc.in_dim * desc.out_dim
        fwd += cost
        if k > 1:
            bwd_act += cost
        if k in upd:
            bwd_w += cost
    return FlopEstimate(fwd, bwd_act, bwd_w)


def peak_memory_estimate(graph: LayerGraph, updated: Iterable[int], batch: int, optimizer: str,
                         quantize_frozen: bool, model: MemoryModel = MemoryModel()) -> int:
    """Parameters + gradients + optimizer state + largest activation working set."""
    upd = set(updated)
    counts = graph.param_counts()
    n_upd = _updated_params(counts, upd)
    n_frozen = sum(counts) - n_upd
    frozen_bytes = model.bytes_quant if quantize_frozen else model.bytes_full
    params = model.bytes_full * n_upd + frozen_bytes * n_frozen
    grads = model.bytes_full * n_upd
    opt = model.optimizer_multiplier(optimizer) * model.bytes_full * n_upd
    # streaming assumption: one layer's input and output live at a time
    act = max((batch * (d.in_dim + d.out_dim) for d in graph.layers), default=0) * model.activation_bytes
    return params + grads + opt + act


# ---------------------------------------------------------------- ledger


@dataclass
class LedgerEntry:
    step: int
    node_id: int
    bytes_up: int = 0
    bytes_down: int = 0
    flops_forward: int = 0
    flops_backward_act: int = 0
    flops_backward_weight: int = 0
    peak_memory_bytes: int = 0


@dataclass
class CostLedger:
    """Per (round/hop, node) costs plus running totals."""

    entries: List[LedgerEntry] = field(default_factory=list)
    bytes_up: int = 0
    bytes_down: int = 0
    flops_forward: int = 0
    flops_backward_act: int = 0
    flops_backward_weight: int = 0
    peak_memory_bytes: int = 0

    def record(self, step: int, node_id: int, *, bytes_up: int = 0, bytes_down: int = 0,
               flops: Optional[FlopEstimate] = None, peak_memory_bytes: int = 0) -> LedgerEntry:
        fl = flops or FlopEstimate(0, 0, 0)
        values = (bytes_up, bytes_down, *fl, peak_memory_bytes)
        if any(v < 0 for v in values):
            raise InputError("ledger counters must be nonnegative")
        e = LedgerEntry(step, node_id, bytes_up, bytes_down, fl.fwd, fl.bwd_act, fl.bwd_w, peak_memory_bytes)
        self.entries.append(e)
        self.bytes_up += bytes_up
        self.bytes_down += bytes_down
        self.flops_forward += fl.fwd
        self.flops_backward_act += fl.bwd_act
        self.flops_backward_weight += fl.bwd_w
        self.peak_memory_bytes = max(self.peak_memory_bytes, peak_memory_bytes)
        return e

    @property
    def flops_total(self) -> int:
        return self.flops_forward + self.flops_backward_act + self.flops_backward_weight

    def snapshot(self) -> Dict[str, int]:
        return {"bytes_up": self.bytes_up, "bytes_down": self.bytes_down, "flops": self.flops_total,
                "peak_memory_bytes": self.peak_memory_bytes}

    def per_node(self) -> Dict[int, Dict[str, int]]:
        out: Dict[int, Dict[str, int]] = {}
        for e in self.entries:
            d = out.setdefault(e.node_id, {"bytes_up": 0, "bytes_down": 0, "flops": 0})
            d["bytes_up"] += e.bytes_up
            d["bytes_down"] += e.bytes_down
            d["flops"] += e.flops_forward + e.flops_backward_act + e.flops_backward_weight
        return out


def summary_csv(rows: Iterable[Dict], extra_columns: Sequence[str] = ()) -> str:
    cols = list(SUMMARY_COLUMNS[:2]) + list(extra_columns) + list(SUMMARY_COLUMNS[2:])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 12))
    return v
