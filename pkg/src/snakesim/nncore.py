"""Minimal feed-forward network used by every framework in the simulator.

Parameterized layers are numbered from 1 (input side) to N (output side).
Layer 1 and layer N are the "first" and "last" layers; 2..N-1 are the middle
layers handed out along the snake.  Weights use the ``x @ W + b`` convention
and are stored in float64; byte accounting assumes a float32 wire format.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, InputError

DENSE = "dense"
RELU = "relu"
HEAD = "softmax-xent-head"
LAYER_KINDS = (DENSE, RELU, HEAD)

FULL = "full-precision"
QUANT8 = "quantized-8bit"


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class LayerGraph:
    layers: Tuple[LayerDesc, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for desc in self.layers:
            if desc.kind not in LAYER_KINDS:
                raise InputError(f"unknown layer kind {desc.kind!r}")
            if desc.kind != DENSE and desc.in_dim != desc.out_dim:
                raise DimensionError(f"{desc.kind} layer must preserve width")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"{a} feeds {b}: {a.out_dim} != {b.in_dim}")

    @property
    def dense_positions(self) -> List[int]:
        return [i for i, d in enumerate(self.layers) if d.kind == DENSE]

    @property
    def n_param_layers(self) -> int:
        return len(self.dense_positions)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def middle_layers(self) -> List[int]:
        return list(range(2, self.n_param_layers))

    def dense(self, layer: int) -> LayerDesc:
        return self.layers[self.dense_positions[layer - 1]]

    def param_count(self, layer: int) -> int:
        d = self.dense(layer)
        return d.in_dim * d.out_dim + d.out_dim

    def param_counts(self) -> List[int]:
        return [self.param_count(i) for i in range(1, self.n_param_layers + 1)]

    def total_params(self) -> int:
        return sum(self.param_counts())

    def validate_snake(self):
        if self.n_param_layers < 3:
            raise DimensionError("snake training needs at least 3 parameterized layers")


def mlp_graph(d_in: int, hidden: int, n_classes: int, n_layers: int) -> LayerGraph:
    """Dense/ReLU stack with ``n_layers`` parameterized layers and a softmax head."""
    if n_layers < 1:
        raise InputError("n_layers must be >= 1")
    layers: List[LayerDesc] = []
    width = d_in
    for i in range(n_layers):
        out = n_classes if i == n_layers - 1 else hidden
        layers.append(LayerDesc(DENSE, width, out))
        if i < n_layers - 1:
            layers.append(LayerDesc(RELU, out, out))
        width = out
    layers.append(LayerDesc(HEAD, n_classes, n_classes))
    return LayerGraph(tuple(layers))


# ---------------------------------------------------------------- quantization


@dataclass(frozen=True)
class QuantizedTensor:
    """Per-tensor affine 8-bit code: ``value = offset + q * scale``."""

    codes: np.ndarray
    scale: float
    offset: float

    def dequantize(self) -> np.ndarray:
        return self.offset + self.codes.astype(np.float64) * self.scale

    @property
    def shape(self):
        return self.codes.shape


def quantize_tensor(x: np.ndarray, bits: int = 8) -> QuantizedTensor:
    if bits != 8:
        raise InputError("only 8-bit quantization is supported")
    x = np.asarray(x, dtype=np.float64)
    lo = float(x.min()) if x.size else 0.0
    hi = float(x.max()) if x.size else 0.0
    levels = 2**bits - 1
    if hi == lo:
        return QuantizedTensor(np.zeros(x.shape, dtype=np.uint8), 1.0, lo)
    scale = (hi - lo) / levels
    # np.rint rounds half to even
    codes = np.clip(np.rint((x - lo) / scale), 0, levels).astype(np.uint8)
    return QuantizedTensor(codes, scale, lo)


# ---------------------------------------------------------------- parameters


def _as_float(t) -> np.ndarray:
    return t.dequantize() if isinstance(t, QuantizedTensor) else t


@dataclass
class ParameterSet:
    """Per-layer tensors plus update flags and storage modes.

    ``weights[i]``/``biases[i]`` belong to layer ``i + 1``.  A quantized layer
    holds :class:`QuantizedTensor` objects instead of arrays.
    """

    weights: List
    biases: List
    update: List[bool]
    storage: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.storage:
            self.storage = [FULL] * len(self.weights)
        if not (len(self.weights) == len(self.biases) == len(self.update) == len(self.storage)):
            raise DimensionError("per-layer lists must have equal length")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layer(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Full-precision (W, b) of layer ``i`` (1-based)."""
        return _as_float(self.weights[i - 1]), _as_float(self.biases[i - 1])

    def updated_layers(self) -> List[int]:
        return [i + 1 for i, u in enumerate(self.update) if u]

    def with_updates(self, updated: Iterable[int]) -> "ParameterSet":
        """Shallow copy with the update flags set to exactly ``updated``."""
        upd = set(updated)
        flags = [(i + 1) in upd for i in range(self.n_layers)]
        for i in upd:
            if self.storage[i - 1] != FULL:
                raise ContractError(f"layer {i} is quantized and cannot be updated")
        return replace(self, weights=list(self.weights), biases=list(self.biases),
                       update=flags, storage=list(self.storage))

    def replace_layers(self, layers: Dict[int, Tuple[np.ndarray, np.ndarray]]) -> "ParameterSet":
        """Shallow copy with the given layers swapped in (full precision)."""
        out = replace(self, weights=list(self.weights), biases=list(self.biases),
                      update=list(self.update), storage=list(self.storage))
        for i, (w, b) in layers.items():
            out.weights[i - 1] = w
            out.biases[i - 1] = b
            out.storage[i - 1] = FULL
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet([np.copy(w) if isinstance(w, np.ndarray) else w for w in self.weights],
                            [np.copy(b) if isinstance(b, np.ndarray) else b for b in self.biases],
                            list(self.update), list(self.storage))

    def layer_hash(self, i: int) -> str:
        return _hash_tensors([self.weights[i - 1], self.biases[i - 1]])

    def digest(self) -> str:
        return _hash_tensors([t for pair in zip(self.weights, self.biases) for t in pair])


def _hash_tensors(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        if isinstance(t, QuantizedTensor):
            h.update(b"q")
            h.update(t.codes.tobytes())
            h.update(struct.pack("<dd", t.scale, t.offset))
        else:
            h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


def init_params(graph: LayerGraph, rng: np.random.Generator, updated: Optional[Iterable[int]] = None) -> ParameterSet:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    weights, biases = [], []
    for pos in graph.dense_positions:
        d = graph.layers[pos]
        bound = math.sqrt(6.0 / d.in_dim)
        weights.append(rng.uniform(-bound, bound, size=(d.in_dim, d.out_dim)))
        biases.append(np.zeros(d.out_dim))
    n = len(weights)
    upd = set(range(1, n + 1)) if updated is None else set(updated)
    return ParameterSet(weights, biases, [(i + 1) in upd for i in range(n)])


def check_params(params: ParameterSet, graph: LayerGraph):
    if params.n_layers != graph.n_param_layers:
        raise DimensionError(f"{params.n_layers} parameter layers for a graph with {graph.n_param_layers}")
    for i in range(1, graph.n_param_layers + 1):
        d = graph.dense(i)
        w, b = params.weights[i - 1], params.biases[i - 1]
        if tuple(w.shape) != (d.in_dim, d.out_dim) or tuple(b.shape) != (d.out_dim,):
            raise DimensionError(f"layer {i} tensors do not match {d}")
        if params.storage[i - 1] != FULL and params.update[i - 1]:
            raise ContractError(f"layer {i} is both quantized and updated")


def quantize_frozen(params: ParameterSet, bits: int = 8, layers: Optional[Iterable[int]] = None) -> ParameterSet:
    """Quantize every non-updated layer, or exactly the given ones."""
    targets = [i + 1 for i, u in enumerate(params.update) if not u] if layers is None else layers
    out = replace(params, weights=list(params.weights), biases=list(params.biases),
                  update=list(params.update), storage=list(params.storage))
    for i in targets:
        if params.update[i - 1]:
            raise ContractError(f"layer {i} is being updated and may not be quantized")
        if out.storage[i - 1] == QUANT8:
            continue
        out.weights[i - 1] = quantize_tensor(params.weights[i - 1], bits)
        out.biases[i - 1] = quantize_tensor(params.biases[i - 1], bits)
        out.storage[i - 1] = QUANT8
    return out


def dequantize_layer(params: ParameterSet, layer: int) -> Tuple[np.ndarray, np.ndarray]:
    return params.layer(layer)


# ---------------------------------------------------------------- flop probe


@dataclass
class FlopCounter:
    """Counts the arithmetic actually executed by forward/backprop."""

    fwd: int = 0
    bwd_act: int = 0
    bwd_w: int = 0

    @property
    def total(self) -> int:
        return self.fwd + self.bwd_act + self.bwd_w


# ---------------------------------------------------------------- forward / backward


@dataclass
class ActivationCache:
    inputs: List[np.ndarray]
    logits: np.ndarray


def forward(params: ParameterSet, graph: LayerGraph, batch: np.ndarray,
            counter: Optional[FlopCounter] = None) -> Tuple[np.ndarray, ActivationCache]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != graph.input_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input dim {graph.input_dim}")
    inputs = []
    k = 0
    for desc in graph.layers:
        inputs.append(x)
        if desc.kind == DENSE:
            k += 1
            w, b = params.layer(k)
            x = x @ w + b
            if counter is not None:
                counter.fwd += 2 * x.shape[0] * desc.in_dim * desc.out_dim + x.size
        elif desc.kind == RELU:
            x = np.maximum(x, 0.0)
            if counter is not None:
                counter.fwd += x.size
    return x, ActivationCache(inputs, x)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / n


def backprop(params: ParameterSet, graph: LayerGraph, cache: ActivationCache, dlogits: np.ndarray,
             counter: Optional[FlopCounter] = None) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Gradients for updated layers only.

    Frozen layers pass activation gradients through but skip dW/db; the pass
    stops once no updated layer remains below the current position.
    """
    updated = params.updated_layers()
    if not updated:
        return {}
    lowest = min(updated)
    grads: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    g = dlogits
    k = graph.n_param_layers
    for pos in range(len(graph.layers) - 1, -1, -1):
        desc = graph.layers[pos]
        x = cache.inputs[pos]
        if desc.kind == DENSE:
            if params.update[k - 1]:
                grads[k] = (x.T @ g, g.sum(axis=0))
                if counter is not None:
                    counter.bwd_w += 2 * x.shape[0] * desc.in_dim * desc.out_dim + g.size
            if k == lowest:
                break
            w, _ = params.layer(k)
            g = g @ w.T
            if counter is not None:
                counter.bwd_act += 2 * x.shape[0] * desc.in_dim * desc.out_dim
            k -= 1
        elif desc.kind == RELU:
            g = g * (x > 0)
            if counter is not None:
                counter.bwd_act += g.size
    return grads


def backward(params: ParameterSet, graph: LayerGraph, cache: ActivationCache, labels: np.ndarray,
             counter: Optional[FlopCounter] = None) -> Tuple[float, Dict[int, Tuple[np.ndarray, np.ndarray]]]:
    loss, dlogits = softmax_xent(cache.logits, labels)
    return loss, backprop(params, graph, cache, dlogits, counter)


# ---------------------------------------------------------------- optimizer


def global_norm(grads: Dict[int, Tuple[np.ndarray, np.ndarray]]) -> float:
    return math.sqrt(sum(float(np.sum(dw * dw)) + float(np.sum(db * db)) for dw, db in grads.values()))


def clip_global_norm(grads: Dict[int, Tuple[np.ndarray, np.ndarray]], max_norm: float):
    if max_norm <= 0:
        raise InputError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    s = max_norm / norm
    return {k: (dw * s, db * s) for k, (dw, db) in grads.items()}


@dataclass
class OptimizerState:
    algorithm: str = "sgd"
    step: int = 0
    m: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    v: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(params: ParameterSet, grads: Dict[int, Tuple[np.ndarray, np.ndarray]],
                   state: OptimizerState, lr: float) -> Tuple[ParameterSet, OptimizerState]:
    """One SGD or Adam step.  Inputs are not mutated."""
    if lr <= 0:
        raise InputError("learning rate must be positive")
    for k in grads:
        if not params.update[k - 1]:
            raise ContractError(f"gradient supplied for frozen layer {k}")
    step = state.step + 1
    new_layers = {}
    m, v = dict(state.m), dict(state.v)
    for k, (dw, db) in grads.items():
        w, b = params.weights[k - 1], params.biases[k - 1]
        if state.algorithm == "sgd":
            new_layers[k] = (w - lr * dw, b - lr * db)
            continue
        mw, mb = m.get(k, (np.zeros_like(w), np.zeros_like(b)))
        vw, vb = v.get(k, (np.zeros_like(w), np.zeros_like(b)))
        b1, b2 = state.beta1, state.beta2
        mw, mb = b1 * mw + (1 - b1) * dw, b1 * mb + (1 - b1) * db
        vw, vb = b2 * vw + (1 - b2) * dw * dw, b2 * vb + (1 - b2) * db * db
        m[k], v[k] = (mw, mb), (vw, vb)
        c1, c2 = 1 - b1**step, 1 - b2**step
        new_layers[k] = (w - lr * (mw / c1) / (np.sqrt(vw / c2) + state.eps),
                         b - lr * (mb / c1) / (np.sqrt(vb / c2) + state.eps))
    out = replace(params, weights=list(params.weights), biases=list(params.biases),
                  update=list(params.update), storage=list(params.storage))
    for k, (w, b) in new_layers.items():
        out.weights[k - 1], out.biases[k - 1] = w, b
    return out, replace(state, step=step, m=m, v=v)


# ---------------------------------------------------------------- wire format


def serialize_params(params: ParameterSet, layers: Optional[Sequence[int]] = None) -> bytes:
    """float32 payload behind a compact JSON header (length-prefixed)."""
    sel = list(layers) if layers is not None else list(range(1, params.n_layers + 1))
    shapes, chunks = [], []
    for i in sel:
        w, b = params.layer(i)
        shapes.append([i, list(w.shape)])
        chunks.append(w.astype("<f4").tobytes())
        chunks.append(b.astype("<f4").tobytes())
    header = json.dumps(shapes, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def deserialize_params(blob: bytes) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    (n,) = struct.unpack_from("<I", blob, 0)
    shapes = json.loads(blob[4:4 + n])
    off = 4 + n
    out = {}
    for i, (rows, cols) in shapes:
        w = np.frombuffer(blob, "<f4", rows * cols, off).reshape(rows, cols).astype(np.float64)
        off += 4 * rows * cols
        b = np.frombuffer(blob, "<f4", cols, off).astype(np.float64)
        off += 4 * cols
        out[i] = (w, b)
    return out
