"""Discrete-event simulation of serpentine layer-wise training.

The process controller (PC) admits nodes, maps every (cycle, middle layer)
slot to a node and walks the chain; in client-server mode the computation
engine (PCE) stores and forwards the model, in peer-to-peer mode nodes hand
the model on directly and only ship layers the receiver does not have.
Simulated time advances through an event queue; local training time is
FLOPs / (capability * FLOP_RATE) and transfers take bytes / bandwidth.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import accounting, nncore
from .accounting import CS, P2P, CostLedger
from .data import Dataset
from .errors import ConfigurationError, InputError
from .nncore import LayerGraph, ParameterSet
from .trainer import LayerAssignment, LocalResult, TrainConfig, train_local

FLOP_RATE = 1.0e6
INF = math.inf

HANDOFF = "handoff"
TRAIN_DONE = "local-train-done"
FAILURE = "node-failure"
EXIT = "node-exit"
UPLOAD = "upload-done"
# tie-break order for events at the same instant
KIND_RANK = {FAILURE: 0, UPLOAD: 1, TRAIN_DONE: 2, EXIT: 3, HANDOFF: 4}

ORDER_MODES = ("sequential", "reverse", "random")


@dataclass(frozen=True)
class Window:
    start: float
    end: float
    up_bw: float = 1.0e6
    down_bw: float = 1.0e6


ALWAYS = (Window(0.0, INF),)


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    shard: Dataset
    capability: float = 1.0
    availability: Tuple[Window, ...] = ALWAYS

    def __post_init__(self):
        if not self.capability > 0:
            raise InputError(f"node {self.node_id}: capability must be positive")
        w = self.availability
        if any(a.end <= a.start for a in w) or any(b.start < a.end for a, b in zip(w, w[1:])):
            raise InputError(f"node {self.node_id}: availability windows must be sorted and disjoint")

    def window_at(self, t: float) -> Optional[Window]:
        """Window containing ``t`` or, failing that, the next one to open."""
        for w in self.availability:
            if w.end > t:
                return w
        return None


# ---------------------------------------------------------------- admission


@dataclass(frozen=True)
class AdmissionPolicy:
    min_capability: float = 0.0
    min_samples: int = 1


@dataclass(frozen=True)
class Admission:
    admitted: Tuple[NodeProfile, ...]
    rejected: Dict[int, str]


def admit_nodes(candidates: Sequence[NodeProfile], policy: AdmissionPolicy = AdmissionPolicy()) -> Admission:
    if not candidates:
        raise InputError("no candidate nodes")
    admitted, rejected = [], {}
    for node in sorted(candidates, key=lambda n: n.node_id):
        if len(node.shard) < policy.min_samples:
            rejected[node.node_id] = "no-data"
        elif node.capability < policy.min_capability:
            rejected[node.node_id] = "low-capability"
        else:
            admitted.append(node)
    if not admitted:
        raise ConfigurationError(f"no admissible nodes: {rejected}")
    return Admission(tuple(admitted), rejected)


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Slot:
    cycle: int
    layer: int
    nodes: Tuple[int, ...]


@dataclass(frozen=True)
class SnakeSchedule:
    order_mode: str
    cycles: int
    slots: Tuple[Slot, ...]
    mode: str = CS
    parallel_replicas: int = 1

    @property
    def node_for_layer(self) -> Dict[Tuple[int, int], int]:
        return {(s.cycle, s.layer): s.nodes[0] for s in self.slots if s.nodes}

    def cycle_slots(self, cycle: int) -> List[Slot]:
        return [s for s in self.slots if s.cycle == cycle]


LayerPolicy = Callable[[Sequence[NodeProfile], LayerGraph, int], Dict[int, Tuple[int, ...]]]


def greedy_proportional(nodes: Sequence[NodeProfile], graph: LayerGraph, replicas: int = 1) -> Dict[int, Tuple[int, ...]]:
    """Heaviest layer first, each to the node(s) that would finish it soonest.

    Finish time is (assigned params + layer params) / capability; ties go to
    the higher capability, then the lower node id.  With at least as many
    equal nodes as layers this is a one-to-one mapping in id order.
    """
    if replicas > len(nodes):
        raise ConfigurationError(f"{replicas} replicas need at least as many nodes")
    layers = sorted(graph.middle_layers, key=lambda i: (-graph.param_count(i), i))
    load = {n.node_id: 0 for n in nodes}
    out = {}
    for layer in layers:
        p = graph.param_count(layer)
        ranked = sorted(nodes, key=lambda n: ((load[n.node_id] + p) / n.capability, -n.capability, n.node_id))
        chosen = tuple(sorted(n.node_id for n in ranked[:replicas]))
        for nid in chosen:
            load[nid] += p
        out[layer] = chosen
    return out


def assign_layers(admitted: Sequence[NodeProfile], graph: LayerGraph, order_mode: str, cycles: int,
                  seed: int = 0, mode: str = CS, parallel_replicas: int = 1,
                  policy: LayerPolicy = greedy_proportional) -> SnakeSchedule:
    if not admitted:
        raise InputError("no admitted nodes")
    if order_mode not in ORDER_MODES:
        raise InputError(f"unknown order mode {order_mode!r}")
    if mode not in (CS, P2P):
        raise InputError(f"unknown hand-off mode {mode!r}")
    if parallel_replicas < 1 or (parallel_replicas > 1 and mode != CS):
        raise InputError("parallel replicas require client-server mode")
    graph.validate_snake()
    mapping = policy(admitted, graph, parallel_replicas)
    rng = np.random.default_rng(seed)
    slots = []
    for c in range(cycles):
        order = list(graph.middle_layers)
        if order_mode == "reverse":
            order.reverse()
        elif order_mode == "random":
            order = [int(i) for i in rng.permutation(order)]
        slots.extend(Slot(c, layer, mapping[layer]) for layer in order)
    return SnakeSchedule(order_mode, cycles, tuple(slots), mode, parallel_replicas)


# ---------------------------------------------------------------- PC state


@dataclass(frozen=True)
class PcState:
    pool: Dict[int, NodeProfile]
    slots: Tuple[Slot, ...]
    slot_index: int = 0
    active: frozenset = frozenset()
    version: int = 0
    removed: Dict[int, str] = field(default_factory=dict)

    @property
    def position(self) -> Optional[Tuple[int, int]]:
        if self.slot_index >= len(self.slots):
            return None
        s = self.slots[self.slot_index]
        return s.cycle, s.layer

    def idle_candidates(self) -> List[NodeProfile]:
        """Pool members not active and holding no slot in the current cycle."""
        cycle = self.slots[self.slot_index].cycle if self.slot_index < len(self.slots) else None
        busy = set(self.active)
        busy.update(n for s in self.slots if s.cycle == cycle for n in s.nodes)
        return sorted((p for nid, p in self.pool.items() if nid not in busy),
                      key=lambda p: (-p.capability, p.node_id))


def pc_remove_node(state: PcState, node_id: int, reason: str) -> PcState:
    """Drop a node from the pool and hand its remaining slots to the best idle candidate.

    Slots before ``slot_index`` are history and stay untouched.  Without an
    idle candidate the node simply disappears from its remaining slots.
    """
    if node_id not in state.pool:
        raise InputError(f"node {node_id} is not in the pool")
    candidates = [p for p in state.idle_candidates() if p.node_id != node_id]
    sub = candidates[0].node_id if candidates else None
    slots = list(state.slots)
    for i in range(state.slot_index, len(slots)):
        s = slots[i]
        if node_id in s.nodes:
            nodes = [n for n in s.nodes if n != node_id]
            if sub is not None and sub not in nodes:
                nodes.append(sub)
            slots[i] = replace(s, nodes=tuple(sorted(nodes)))
    active = set(state.active)
    if node_id in active:
        active.discard(node_id)
        if sub is not None:
            active.add(sub)
    pool = {k: v for k, v in state.pool.items() if k != node_id}
    return replace(state, pool=pool, slots=tuple(slots), active=frozenset(active),
                   removed={**state.removed, node_id: reason})


# ---------------------------------------------------------------- aggregation and exit


def pce_aggregate(updates: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted elementwise mean of replica tensors."""
    if not updates:
        raise InputError("need at least one replica")
    if len(updates) != len(weights):
        raise InputError("one weight per replica")
    shape = np.shape(updates[0])
    if any(np.shape(u) != shape for u in updates):
        raise InputError("replica tensors differ in shape")
    if len(updates) == 1:
        return np.asarray(updates[0])
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise InputError("weights must be nonnegative with a positive sum")
    base = np.asarray(updates[0])
    acc = np.zeros(shape)
    for u, wi in zip(updates[1:], w[1:]):
        acc = acc + wi * (np.asarray(u) - base)
    return base + acc / w.sum()


@dataclass(frozen=True)
class ExitConfig:
    max_epochs: Optional[int] = None
    metric_threshold: Optional[float] = None
    min_improvement: Optional[float] = None
    patience: int = 3


def should_exit(history: Sequence[float], cfg: ExitConfig) -> bool:
    """Exit on epoch budget, metric threshold, or a plateau.

    ``history`` holds one higher-is-better metric value per local epoch.
    """
    if not history:
        raise InputError("empty history")
    if cfg.max_epochs is not None and len(history) >= cfg.max_epochs:
        return True
    if cfg.metric_threshold is not None and history[-1] >= cfg.metric_threshold:
        return True
    if cfg.min_improvement is not None and len(history) > cfg.patience:
        recent = history[-cfg.patience - 1:]
        gain = max(b - a for a, b in zip(recent, recent[1:]))
        if gain < cfg.min_improvement:
            return True
    return False


# ---------------------------------------------------------------- trace


@dataclass
class TraceEvent:
    time: float
    kind: str
    node_id: int
    cycle: int
    layer: int
    bytes_up: int = 0
    bytes_down: int = 0
    flops: int = 0
    loss: Optional[float] = None
    note: str = ""

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "kind": self.kind, "node_id": self.node_id, "cycle": self.cycle,
                           "layer": self.layer, "bytes_up": self.bytes_up, "bytes_down": self.bytes_down,
                           "flops": self.flops, "loss": self.loss, "note": self.note}, sort_keys=True)


@dataclass
class Evaluation:
    step: int
    time: float
    bytes_up: int
    bytes_down: int
    flops: int
    accuracy: float
    loss: float


@dataclass
class RunTrace:
    events: List[TraceEvent] = field(default_factory=list)
    evaluations: List[Evaluation] = field(default_factory=list)
    ledger: CostLedger = field(default_factory=CostLedger)
    final_params: Optional[ParameterSet] = None
    completed: List[Tuple[int, int]] = field(default_factory=list)
    skipped: List[Tuple[int, int]] = field(default_factory=list)
    versions: List[int] = field(default_factory=list)
    partial_uploads: List[Dict] = field(default_factory=list)
    train_intervals: List[Tuple[float, float, int]] = field(default_factory=list)
    removed: Dict[int, str] = field(default_factory=dict)
    kd_active: bool = False

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def totals(self) -> Dict[str, int]:
        return {"bytes_up": sum(e.bytes_up for e in self.events),
                "bytes_down": sum(e.bytes_down for e in self.events),
                "flops": sum(e.flops for e in self.events)}


def read_jsonl(text: str) -> List[TraceEvent]:
    return [TraceEvent(**json.loads(line)) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class FailureSpec:
    """Knock out the node training (cycle, layer) after ``at_fraction`` of its run."""

    cycle: int
    layer: int
    at_fraction: float = 0.5
    node_id: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.at_fraction < 1:
            raise InputError("at_fraction must lie in [0, 1)")


Evaluator = Callable[[ParameterSet], Tuple[float, float]]


def _local_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


class _Replica:
    __slots__ = ("node_id", "base", "teacher", "start", "duration", "result", "down")

    def __init__(self, node_id, base, down):
        self.node_id, self.base, self.down = node_id, base, down
        self.teacher = base
        self.start = self.duration = 0.0
        self.result: Optional[LocalResult] = None


class SnakeSimulator:
    """Event loop behind :func:`run_snake`; one instance per run."""

    def __init__(self, schedule: SnakeSchedule, graph: LayerGraph, params: ParameterSet, cfg: TrainConfig,
                 nodes: Sequence[NodeProfile], failure_plan: Sequence[FailureSpec] = (), seed: int = 0,
                 evaluate: Optional[Evaluator] = None, exit_cfg: Optional[ExitConfig] = None):
        graph.validate_snake()
        nncore.check_params(params, graph)
        known = {n.node_id for n in nodes}
        for s in schedule.slots:
            if not set(s.nodes) <= known:
                raise InputError(f"slot {s} references unknown nodes")
        self.schedule, self.graph, self.cfg, self.seed = schedule, graph, cfg, seed
        self.evaluate, self.exit_cfg = evaluate, exit_cfg
        self.counts = graph.param_counts()
        self.n_layers = graph.n_param_layers
        self.state = PcState(pool={n.node_id: n for n in nodes}, slots=schedule.slots)
        self.params = params.with_updates(())
        self.layer_version = [0] * self.n_layers
        self.caches: Dict[int, Tuple[int, ...]] = {}
        self.failures = {(f.cycle, f.layer): f for f in failure_plan}
        self.queue: list = []
        self._seq = 0
        self.trace = RunTrace(kd_active=cfg.kd is not None)
        self.trace.versions.append(0)
        self.replicas: Dict[int, _Replica] = {}
        self.results: List[LocalResult] = []
        self.history: Dict[int, List[float]] = {}

    # -- plumbing

    def _push(self, t: float, kind: str, node_id: int, payload=None):
        heapq.heappush(self.queue, (t, KIND_RANK[kind], node_id, self._seq, kind, payload))
        self._seq += 1

    def _slot(self) -> Slot:
        return self.state.slots[self.state.slot_index]

    def _log(self, t, kind, node_id, **kw) -> TraceEvent:
        s = self._slot() if self.state.slot_index < len(self.state.slots) else Slot(-1, -1, ())
        e = TraceEvent(t, kind, node_id, s.cycle, s.layer, **kw)
        self.trace.events.append(e)
        return e

    def _updated_set(self, slot: Slot) -> List[int]:
        return sorted(LayerAssignment(frozenset({slot.layer}), self.n_layers).updated_set)

    def _layer_bytes(self, layers) -> int:
        return accounting.BYTES_FULL * sum(self.counts[i - 1] for i in layers)

    # -- run

    def run(self) -> RunTrace:
        self._start_slot(0.0)
        while self.queue:
            t, _, node_id, _, kind, payload = heapq.heappop(self.queue)
            getattr(self, "_on_" + kind.replace("-", "_"))(t, node_id, payload)
        self.trace.final_params = self.params
        self.trace.removed = dict(self.state.removed)
        return self.trace

    def _start_slot(self, t: float):
        while self.state.slot_index < len(self.state.slots):
            slot = self._slot()
            live = [n for n in slot.nodes if n in self.state.pool]
            if live:
                self.results = []
                for nid in live:
                    self._dispatch(t, nid)
                return
            self._skip(t, -1)
        self._finish_cycle(t, final=True)

    def _dispatch(self, t: float, node_id: int):
        node = self.state.pool[node_id]
        win = node.window_at(t)
        if win is None:
            self._fail(t, node_id, None, "unavailable")
            return
        start = max(t, win.start)
        cached = self.caches.get(node_id)
        if self.schedule.mode == P2P and cached is not None:
            stale = [i + 1 for i, v in enumerate(self.layer_version) if cached[i] != v]
            down = self._layer_bytes(stale)
        else:
            down = self._layer_bytes(range(1, self.n_layers + 1))
        self.replicas[node_id] = _Replica(node_id, self.params, down)
        self.state = replace(self.state, active=self.state.active | {node_id})
        self._push(start + down / win.down_bw, HANDOFF, node_id)

    def _on_handoff(self, t, node_id, _):
        rep = self.replicas[node_id]
        slot = self._slot()
        self._log(t, HANDOFF, node_id, bytes_down=rep.down)
        self.trace.ledger.record(self._step(), node_id, bytes_down=rep.down)
        self.caches[node_id] = tuple(self.layer_version)
        node = self.state.pool[node_id]
        win = node.window_at(t)
        if win is None:
            # availability ended while the model was in flight
            self._push(t, FAILURE, node_id)
            return
        t = max(t, win.start)
        rep.result = self._train(rep, slot, node_id)
        rep.start = t
        rep.duration = rep.result.flops.total / (node.capability * FLOP_RATE)
        end = t + rep.duration
        fail_t = None
        spec = self.failures.get((slot.cycle, slot.layer))
        if spec is not None and spec.node_id in (None, node_id):
            del self.failures[(slot.cycle, slot.layer)]
            fail_t = t + spec.at_fraction * rep.duration
        if win.end < end and (fail_t is None or win.end < fail_t):
            fail_t = win.end
        if fail_t is not None:
            self._push(fail_t, FAILURE, node_id)
        else:
            self._push(end, TRAIN_DONE, node_id)

    def _train(self, rep: _Replica, slot: Slot, node_id: int, epochs: Optional[int] = None) -> LocalResult:
        node = self.state.pool[node_id]
        assignment = LayerAssignment(frozenset({slot.layer}), self.n_layers)
        teacher = rep.teacher if self.cfg.kd is not None else None
        return train_local(rep.base, self.graph, assignment, node.shard, self.cfg, slot.cycle, teacher,
                           _local_seed(self.seed, slot.cycle, slot.layer, node_id), epochs=epochs)

    def _on_local_train_done(self, t, node_id, _):
        rep = self.replicas[node_id]
        res = rep.result
        self.trace.train_intervals.append((rep.start, t, node_id))
        self._log(t, TRAIN_DONE, node_id, flops=res.flops.total, loss=res.train_loss[-1])
        up = self._layer_bytes(res.updated_params)
        win = self.state.pool[node_id].window_at(t) or Window(t, INF)
        self._push(t + up / win.up_bw, UPLOAD, node_id, up)

    def _on_upload_done(self, t, node_id, up):
        rep = self.replicas.pop(node_id)
        res = rep.result
        self._log(t, UPLOAD, node_id, bytes_up=up)
        self.trace.ledger.record(self._step(), node_id, bytes_up=up, flops=res.flops,
                                 peak_memory_bytes=self._peak_memory(res))
        self.state = replace(self.state, active=self.state.active - {node_id})
        self.results.append(res)
        self.history.setdefault(node_id, []).extend(res.train_metric)
        if not self.replicas:
            self._commit(t)
        if self.exit_cfg is not None and node_id in self.state.pool \
                and should_exit(self.history[node_id], self.exit_cfg):
            self._log(t, EXIT, node_id, note="exit-requested")
            self.state = pc_remove_node(self.state, node_id, "exit")
        if not self.replicas:
            self._advance(t)

    def _peak_memory(self, res: LocalResult) -> int:
        return accounting.peak_memory_estimate(self.graph, res.updated_params, self.cfg.batch_size,
                                               self.cfg.optimizer, self.cfg.quantize_frozen)

    def _step(self) -> int:
        return self.state.slot_index

    def _apply(self, layers: Dict[int, Tuple[np.ndarray, np.ndarray]]):
        self.params = self.params.replace_layers(layers)
        version = self.state.version + 1
        self.state = replace(self.state, version=version)
        for i in layers:
            self.layer_version[i - 1] = version
        self.trace.versions.append(version)

    def _commit(self, t: float):
        results, self.results = self.results, []
        slot = self._slot()
        if len(results) == 1:
            merged = results[0].updated_params
        else:
            weights = [r.n_samples for r in results]
            merged = {}
            for i in results[0].updated_params:
                merged[i] = (pce_aggregate([r.updated_params[i][0] for r in results], weights),
                             pce_aggregate([r.updated_params[i][1] for r in results], weights))
        self._apply(merged)
        self.trace.completed.append((slot.cycle, slot.layer))
        # the uploader holds exactly the new model
        if self.schedule.mode == P2P:
            for nid in slot.nodes:
                if nid in self.caches:
                    self.caches[nid] = tuple(self.layer_version)

    def _advance(self, t: float):
        slot = self._slot()
        self.state = replace(self.state, slot_index=self.state.slot_index + 1)
        nxt = self.state.slot_index
        if nxt >= len(self.state.slots) or self.state.slots[nxt].cycle != slot.cycle:
            self._finish_cycle(t, cycle=slot.cycle)
        self._start_slot(t)

    def _finish_cycle(self, t: float, cycle: Optional[int] = None, final: bool = False):
        if final or self.evaluate is None or cycle is None:
            return
        acc, loss = self.evaluate(self.params)
        led = self.trace.ledger
        self.trace.evaluations.append(Evaluation(cycle, t, led.bytes_up, led.bytes_down, led.flops_total,
                                                 float(acc), float(loss)))

    def _skip(self, t: float, node_id: int):
        slot = self._slot()
        self.trace.skipped.append((slot.cycle, slot.layer))
        self._log(t, FAILURE, node_id, note="skipped_slot")
        self._advance_without_start(t)

    def _advance_without_start(self, t: float):
        slot = self._slot()
        self.state = replace(self.state, slot_index=self.state.slot_index + 1)
        nxt = self.state.slot_index
        if nxt >= len(self.state.slots) or self.state.slots[nxt].cycle != slot.cycle:
            self._finish_cycle(t, cycle=slot.cycle)

    def _on_node_failure(self, t, node_id, _):
        self._fail(t, node_id, self.replicas.get(node_id), "failure")

    def _fail(self, t: float, node_id: int, rep: Optional[_Replica], reason: str):
        slot = self._slot()
        note = reason
        if rep is not None and rep.result is not None:
            per_epoch = rep.duration / self.cfg.epochs
            done = min(int((t - rep.start) / per_epoch) if per_epoch > 0 else 0, self.cfg.epochs - 1)
            self.trace.train_intervals.append((rep.start, t, node_id))
            if done >= 1 and self.schedule.parallel_replicas == 1:
                partial = self._train(rep, slot, node_id, epochs=done)
                up = self._layer_bytes(partial.updated_params)
                digest = nncore.ParameterSet(
                    [partial.updated_params[i][0] for i in sorted(partial.updated_params)],
                    [partial.updated_params[i][1] for i in sorted(partial.updated_params)],
                    [True] * len(partial.updated_params)).digest()
                self._log(t, UPLOAD, node_id, bytes_up=up, flops=partial.flops.total,
                          loss=partial.train_loss[-1], note=f"partial-upload epochs={done}")
                self.trace.ledger.record(self._step(), node_id, bytes_up=up, flops=partial.flops,
                                         peak_memory_bytes=self._peak_memory(partial))
                self.trace.partial_uploads.append({"cycle": slot.cycle, "layer": slot.layer, "node_id": node_id,
                                                   "epochs": done, "digest": digest})
                self._apply(partial.updated_params)
        self.replicas.pop(node_id, None)
        before = set(self.state.pool)
        self.state = pc_remove_node(self.state, node_id, reason)
        current = self._slot()
        sub = [n for n in current.nodes if n not in slot.nodes and n in self.state.pool and n in before]
        if sub:
            self._log(t, FAILURE, node_id, note=f"{note}; reassigned to node {sub[0]}")
            self._dispatch(t, sub[0])
            return
        if self.replicas:
            self._log(t, FAILURE, node_id, note=f"{note}; replica dropped")
            return
        if self.results:
            self._log(t, FAILURE, node_id, note=f"{note}; replica dropped")
            self._commit(t)
            self._advance(t)
            return
        self._log(t, FAILURE, node_id, note=f"{note}; no idle candidate")
        self.trace.skipped.append((slot.cycle, slot.layer))
        self._log(t, FAILURE, node_id, note="skipped_slot")
        self._advance(t)


def run_snake(schedule: SnakeSchedule, graph: LayerGraph, params: ParameterSet, cfg: TrainConfig,
              nodes: Sequence[NodeProfile], failure_plan: Sequence[FailureSpec] = (), seed: int = 0,
              evaluate: Optional[Evaluator] = None, exit_cfg: Optional[ExitConfig] = None) -> RunTrace:
    """Simulate a full snake run and return its trace."""
    return SnakeSimulator(schedule, graph, params, cfg, nodes, failure_plan, seed, evaluate, exit_cfg).run()
