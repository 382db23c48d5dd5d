"""Local training run executed by one node on its own shard."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import nncore
from .accounting import FlopEstimate, flop_estimate
from .data import Dataset, distribution_discrepancy
from .errors import ConfigurationError, DimensionError, InputError
from .nncore import LayerGraph, OptimizerState, ParameterSet

DEFAULT_KD_THRESHOLD = 0.2


@dataclass(frozen=True)
class LayerAssignment:
    """Middle layers a node trains; the first and last layer always come along."""

    middle_layers: FrozenSet[int]
    n_layers: int

    def __post_init__(self):
        object.__setattr__(self, "middle_layers", frozenset(self.middle_layers))
        if self.n_layers < 3:
            raise InputError("a layer assignment needs at least 3 parameterized layers")
        if not self.middle_layers:
            raise InputError("at least one middle layer must be assigned")
        bad = [i for i in self.middle_layers if not 2 <= i <= self.n_layers - 1]
        if bad:
            raise InputError(f"middle layers {sorted(bad)} outside [2, {self.n_layers - 1}]")

    @property
    def updated_set(self) -> FrozenSet[int]:
        return frozenset({1, self.n_layers} | self.middle_layers)

    @classmethod
    def full(cls, n_layers: int) -> "LayerAssignment":
        return cls(frozenset(range(2, n_layers)), n_layers)


@dataclass(frozen=True)
class KDConfig:
    weight: float = 0.5
    temperature: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    base_lr: float = 0.05
    cycle_decay: float = 0.7
    clip_norm: float = 1.0
    kd: Optional[KDConfig] = None
    optimizer: str = "sgd"
    quantize_frozen: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.base_lr < 0:
            raise InputError("base_lr must be nonnegative")
        if not 0 < self.cycle_decay <= 1:
            raise InputError("cycle_decay must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise InputError("clip_norm must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LocalResult:
    updated_params: Dict[int, Tuple[np.ndarray, np.ndarray]]
    train_loss: List[float]
    train_metric: List[float]
    steps: int
    flops: FlopEstimate
    lr: float
    epochs_completed: int
    n_samples: int = 0


def lr_for_cycle(base_lr: float, cycle: int, cycle_decay: float) -> float:
    if cycle < 0:
        raise InputError("cycle must be >= 0")
    return base_lr * cycle_decay**cycle


def _softmax_t(logits: np.ndarray, T: float) -> np.ndarray:
    return nncore.softmax(logits / T)


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, T: float) -> float:
    """T^2 * mean_b CE(softmax(teacher/T), softmax(student/T))."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError("student and teacher logits differ in shape")
    if T <= 0:
        raise InputError("temperature must be positive")
    p_t = _softmax_t(teacher_logits, T)
    log_p_s = nncore.log_softmax(student_logits / T)
    return float(T * T * -(p_t * log_p_s).sum(axis=1).mean())


def kd_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, T: float) -> np.ndarray:
    """Gradient of :func:`kd_loss` with respect to the student logits."""
    n = student_logits.shape[0]
    return T * (_softmax_t(student_logits, T) - _softmax_t(teacher_logits, T)) / n


def should_activate_kd(histograms: Sequence[Sequence[float]], threshold: float = DEFAULT_KD_THRESHOLD) -> bool:
    """True iff the largest pairwise JS distance between node histograms exceeds ``threshold``."""
    if len(histograms) < 2:
        raise InputError("need at least two nodes to measure discrepancy")
    worst = max(distribution_discrepancy(a, b) for a, b in itertools.combinations(histograms, 2))
    return worst > threshold


def train_local(params: ParameterSet, graph: LayerGraph, assignment: LayerAssignment, shard: Dataset,
                cfg: TrainConfig, cycle: int, teacher: Optional[ParameterSet] = None, seed: int = 0,
                epochs: Optional[int] = None, lr: Optional[float] = None) -> LocalResult:
    """Train the assigned layers for ``cfg.epochs`` passes over ``shard``.

    ``epochs`` truncates the run (the first k epochs are identical to a full
    run with the same seed), which is how an interrupted node's epoch-boundary
    state is reproduced.  ``lr`` overrides the per-cycle learning rate.
    """
    if len(shard) == 0:
        raise ConfigurationError("cannot train on an empty shard")
    if assignment.n_layers != graph.n_param_layers:
        raise InputError("assignment does not match the graph depth")
    if (cfg.kd is not None) != (teacher is not None):
        raise InputError("a teacher is required exactly when knowledge distillation is on")
    nncore.check_params(params, graph)

    updated = sorted(assignment.updated_set)
    work = params.with_updates(updated)
    if cfg.quantize_frozen:
        frozen = [i for i in range(1, graph.n_param_layers + 1) if i not in assignment.updated_set]
        work = nncore.quantize_frozen(work, layers=frozen)
    # private copies of the trained tensors; frozen tensors stay shared and untouched
    work = work.replace_layers({i: (np.copy(work.weights[i - 1]), np.copy(work.biases[i - 1])) for i in updated})

    step_lr = lr_for_cycle(cfg.base_lr, cycle, cfg.cycle_decay) if lr is None else lr
    opt = OptimizerState(cfg.optimizer)
    n_epochs = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    rng = np.random.default_rng(seed)
    X, y = shard.features, shard.labels
    losses, metrics = [], []
    fl = [0, 0, 0]
    steps = 0
    for _ in range(n_epochs):
        order = rng.permutation(len(y))
        ep_loss = ep_correct = 0.0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            logits, cache = nncore.forward(work, graph, xb)
            loss, dlogits = nncore.softmax_xent(logits, yb)
            if cfg.kd is not None:
                t_logits, _ = nncore.forward(teacher, graph, xb)
                loss += cfg.kd.weight * kd_loss(logits, t_logits, cfg.kd.temperature)
                dlogits = dlogits + cfg.kd.weight * kd_grad(logits, t_logits, cfg.kd.temperature)
                fl[0] += flop_estimate(graph, len(idx), ()).fwd
            grads = nncore.backprop(work, graph, cache, dlogits)
            grads = nncore.clip_global_norm(grads, cfg.clip_norm)
            if step_lr > 0:
                work, opt = nncore.optimizer_step(work, grads, opt, step_lr)
            est = flop_estimate(graph, len(idx), updated)
            fl[0] += est.fwd
            fl[1] += est.bwd_act
            fl[2] += est.bwd_w
            steps += 1
            ep_loss += loss * len(idx)
            ep_correct += float(np.sum(logits.argmax(axis=1) == yb))
        losses.append(ep_loss / len(y))
        metrics.append(ep_correct / len(y))

    return LocalResult(
        updated_params={i: (work.weights[i - 1], work.biases[i - 1]) for i in updated},
        train_loss=losses, train_metric=metrics, steps=steps, flops=FlopEstimate(*fl), lr=step_lr,
        epochs_completed=n_epochs, n_samples=len(y))


def apply_result(params: ParameterSet, result: LocalResult) -> ParameterSet:
    return params.replace_layers(result.updated_params)
