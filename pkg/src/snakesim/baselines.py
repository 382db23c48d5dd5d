"""FedAvg and a local-loss split baseline (Accelerated-FL style)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import accounting, nncore
from .accounting import FlopEstimate, flop_estimate
from .data import Dataset
from .errors import DimensionError, InputError
from .nncore import DENSE, HEAD, LayerDesc, LayerGraph, OptimizerState, ParameterSet
from .orchestrator import (FLOP_RATE, HANDOFF, TRAIN_DONE, UPLOAD, Evaluation, Evaluator, NodeProfile,
                           RunTrace, TraceEvent, _local_seed)
from .trainer import LayerAssignment, LocalResult, TrainConfig, lr_for_cycle, train_local


@dataclass(frozen=True)
class FedRoundConfig:
    rounds: int = 10
    nodes_per_round: Optional[int] = None

    def __post_init__(self):
        if self.rounds < 1:
            raise InputError("rounds must be >= 1")


def fedavg_aggregate(client_params: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Shard-size-weighted mean of full client models."""
    if not client_params:
        raise InputError("no client models to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(client_params) or w.sum() <= 0:
        raise InputError("need one positive weight per client")
    w = w / w.sum()
    n = client_params[0].n_layers
    weights_out, biases_out = [], []
    for i in range(1, n + 1):
        layers = [p.layer(i) for p in client_params]
        if any(l[0].shape != layers[0][0].shape for l in layers):
            raise DimensionError(f"clients disagree on the shape of layer {i}")
        # averaging offsets from the first client keeps identical clients bit-exact
        w0, b0 = layers[0]
        weights_out.append(w0 + sum(wi * (l[0] - w0) for wi, l in zip(w[1:], layers[1:])))
        biases_out.append(b0 + sum(wi * (l[1] - b0) for wi, l in zip(w[1:], layers[1:])))
    return ParameterSet(weights_out, biases_out, [False] * n)


def fedavg_round(global_params: ParameterSet, graph: LayerGraph, shards: Sequence[Dataset], cfg: TrainConfig,
                 round_idx: int = 0, seed: int = 0) -> Tuple[ParameterSet, List[LocalResult]]:
    """Every client trains the full model for ``cfg.epochs`` epochs; the server averages."""
    if not shards:
        raise InputError("zero clients selected")
    full = LayerAssignment.full(graph.n_param_layers)
    results = [train_local(global_params, graph, full, shard, cfg, round_idx, None,
                           _local_seed(seed, round_idx, 0, k)) for k, shard in enumerate(shards)]
    models = [global_params.replace_layers(r.updated_params) for r in results]
    return fedavg_aggregate(models, [r.n_samples for r in results]), results


def run_fedavg(nodes: Sequence[NodeProfile], graph: LayerGraph, params: ParameterSet, cfg: TrainConfig,
               rounds: int, seed: int = 0, evaluate: Optional[Evaluator] = None) -> RunTrace:
    """Synchronous FedAvg; each round ends when the slowest client has uploaded."""
    trace = RunTrace()
    total = graph.total_params()
    down, up = accounting.fedavg_round_bytes(total)
    peak = accounting.peak_memory_estimate(graph, range(1, graph.n_param_layers + 1), cfg.batch_size,
                                           cfg.optimizer, False)
    t = 0.0
    g = params.with_updates(())
    for r in range(rounds):
        g_next, results = fedavg_round(g, graph, [n.shard for n in nodes], cfg, r, seed)
        events = []
        end = t
        for node, res in zip(nodes, results):
            win = node.window_at(t) or nodes[0].availability[0]
            t_recv = t + down / win.down_bw
            t_done = t_recv + res.flops.total / (node.capability * FLOP_RATE)
            t_up = t_done + up / win.up_bw
            events += [TraceEvent(t_recv, HANDOFF, node.node_id, r, -1, bytes_down=down),
                       TraceEvent(t_done, TRAIN_DONE, node.node_id, r, -1, flops=res.flops.total,
                                  loss=res.train_loss[-1]),
                       TraceEvent(t_up, UPLOAD, node.node_id, r, -1, bytes_up=up)]
            trace.ledger.record(r, node.node_id, bytes_up=up, bytes_down=down, flops=res.flops,
                                peak_memory_bytes=peak)
            trace.train_intervals.append((t_recv, t_done, node.node_id))
            end = max(end, t_up)
        events.sort(key=lambda e: (e.time, e.node_id))
        trace.events.extend(events)
        g = g_next
        t = end
        trace.versions.append(r + 1)
        trace.completed.append((r, -1))
        if evaluate is not None:
            acc, loss = evaluate(g)
            led = trace.ledger
            trace.evaluations.append(Evaluation(r, t, led.bytes_up, led.bytes_down, led.flops_total,
                                                float(acc), float(loss)))
    trace.final_params = g
    return trace


# ---------------------------------------------------------------- Accelerated FL


def split_graph(graph: LayerGraph, cut: int = 2) -> Tuple[LayerGraph, LayerGraph]:
    """Client graph (first ``cut`` dense layers plus a linear aux head) and server graph."""
    if not 1 <= cut < graph.n_param_layers:
        raise InputError(f"cut must lie in [1, {graph.n_param_layers - 1}]")
    pos = graph.dense_positions[cut]
    front = list(graph.layers[:pos])
    width = front[-1].out_dim
    k = graph.n_classes
    client = LayerGraph(tuple(front + [LayerDesc(DENSE, width, k), LayerDesc(HEAD, k, k)]))
    return client, LayerGraph(graph.layers[pos:])


@dataclass
class AuxHeadModel:
    graph: LayerGraph
    client: ParameterSet
    server: ParameterSet
    cut: int = 2

    @classmethod
    def from_params(cls, graph: LayerGraph, params: ParameterSet, rng: np.random.Generator, cut: int = 2):
        cgraph, _ = split_graph(graph, cut)
        aux = nncore.init_params(LayerGraph((cgraph.layers[-2], cgraph.layers[-1])), rng)
        n = graph.n_param_layers
        client = ParameterSet([params.layer(i)[0] for i in range(1, cut + 1)] + aux.weights,
                              [params.layer(i)[1] for i in range(1, cut + 1)] + aux.biases, [True] * (cut + 1))
        server = ParameterSet([params.layer(i)[0] for i in range(cut + 1, n + 1)],
                              [params.layer(i)[1] for i in range(cut + 1, n + 1)], [True] * (n - cut))
        return cls(graph, client, server, cut)

    @property
    def graphs(self) -> Tuple[LayerGraph, LayerGraph]:
        return split_graph(self.graph, self.cut)

    def full_params(self) -> ParameterSet:
        """Client layers without the aux head followed by the server layers."""
        c = self.cut
        return ParameterSet(list(self.client.weights[:c]) + list(self.server.weights),
                            list(self.client.biases[:c]) + list(self.server.biases),
                            [False] * (c + self.server.n_layers))


def accel_fl_grads(model: AuxHeadModel, xb: np.ndarray, yb: np.ndarray, counter=None):
    """Gradients tagged by the loss that produced them.

    ``"aux"`` holds client-layer (and aux-head) gradients from the aux-head
    loss; ``"server"`` holds server-layer gradients from the end loss.  The
    server loss is computed on detached activations, so nothing flows back.
    """
    cgraph, sgraph = model.graphs
    c_logits, c_cache = nncore.forward(model.client, cgraph, xb, counter)
    aux_loss, c_grads = nncore.backward(model.client, cgraph, c_cache, yb, counter)
    acts = c_cache.inputs[len(cgraph.layers) - 2]
    s_logits, s_cache = nncore.forward(model.server, sgraph, np.array(acts), counter)
    server_loss, s_grads = nncore.backward(model.server, sgraph, s_cache, yb, counter)
    return {"aux": c_grads, "server": s_grads}, {"aux": aux_loss, "server": server_loss}, acts


def _client_session(model: AuxHeadModel, shard: Dataset, cfg: TrainConfig, lr: float, seed: int):
    cgraph, sgraph = model.graphs
    client, server = model.client, model.server
    c_opt, s_opt = OptimizerState(cfg.optimizer), OptimizerState(cfg.optimizer)
    rng = np.random.default_rng(seed)
    losses = []
    fl = np.zeros(3, dtype=np.int64)
    act_values = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(shard))
        tot = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = shard.features[idx], shard.labels[idx]
            grads, loss, acts = accel_fl_grads(AuxHeadModel(model.graph, client, server, model.cut), xb, yb)
            act_values += acts.size
            if lr > 0:
                client, c_opt = nncore.optimizer_step(client, nncore.clip_global_norm(grads["aux"], cfg.clip_norm),
                                                      c_opt, lr)
                server, s_opt = nncore.optimizer_step(server, nncore.clip_global_norm(grads["server"], cfg.clip_norm),
                                                      s_opt, lr)
            fl += np.array(flop_estimate(cgraph, len(idx), range(1, client.n_layers + 1)))
            fl += np.array(flop_estimate(sgraph, len(idx), range(1, server.n_layers + 1)))
            tot += loss["server"] * len(idx)
        losses.append(tot / len(shard))
    return client, server, losses, FlopEstimate(*(int(v) for v in fl)), act_values


def accel_fl_round(model: AuxHeadModel, shards: Sequence[Dataset], cfg: TrainConfig, round_idx: int = 0,
                   seed: int = 0):
    """Clients train on the aux loss, the server on the end loss; client parts are averaged.

    Returns the new model and per-client (flops, activation values sent, last loss).
    """
    if not shards:
        raise InputError("zero clients selected")
    lr = lr_for_cycle(cfg.base_lr, round_idx, cfg.cycle_decay)
    server = model.server
    clients, stats = [], []
    for k, shard in enumerate(shards):
        session = AuxHeadModel(model.graph, model.client, server, model.cut)
        c, server, losses, fl, acts = _client_session(session, shard, cfg, lr, _local_seed(seed, round_idx, 0, k))
        clients.append(c)
        stats.append((fl, acts, losses[-1]))
    sizes = [len(s) for s in shards]
    avg = fedavg_aggregate(clients, sizes)
    client = ParameterSet(avg.weights, avg.biases, [True] * avg.n_layers)
    return AuxHeadModel(model.graph, client, server.with_updates(range(1, server.n_layers + 1)), model.cut), stats


def run_accel_fl(nodes: Sequence[NodeProfile], graph: LayerGraph, params: ParameterSet, cfg: TrainConfig,
                 rounds: int, seed: int = 0, evaluate: Optional[Evaluator] = None, cut: int = 2) -> RunTrace:
    trace = RunTrace()
    model = AuxHeadModel.from_params(graph, params, np.random.default_rng(_local_seed(seed, 99)), cut)
    client_bytes = accounting.BYTES_FULL * sum(
        p.size for p in list(model.client.weights) + list(model.client.biases))
    t = 0.0
    for r in range(rounds):
        model, stats = accel_fl_round(model, [n.shard for n in nodes], cfg, r, seed)
        end = t
        for node, (fl, acts, loss) in zip(nodes, stats):
            win = node.window_at(t) or nodes[0].availability[0]
            up = client_bytes + accounting.BYTES_FULL * acts
            t_recv = t + client_bytes / win.down_bw
            t_done = t_recv + fl.total / (node.capability * FLOP_RATE)
            t_up = t_done + up / win.up_bw
            trace.events += [TraceEvent(t_recv, HANDOFF, node.node_id, r, -1, bytes_down=client_bytes),
                             TraceEvent(t_done, TRAIN_DONE, node.node_id, r, -1, flops=fl.total, loss=loss),
                             TraceEvent(t_up, UPLOAD, node.node_id, r, -1, bytes_up=up, note="client part + activations")]
            trace.ledger.record(r, node.node_id, bytes_up=up, bytes_down=client_bytes, flops=fl)
            end = max(end, t_up)
        t = end
        trace.completed.append((r, -1))
        if evaluate is not None:
            acc, loss = evaluate(model.full_params())
            led = trace.ledger
            trace.evaluations.append(Evaluation(r, t, led.bytes_up, led.bytes_down, led.flops_total,
                                                float(acc), float(loss)))
    trace.final_params = model.full_params()
    return trace
