"""Synthetic datasets, node partitioning and local preprocessing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InputError

MAX_DIRICHLET_RETRIES = 100
JS_SMOOTHING = 1e-12


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "data"
    n_classes: Optional[int] = None

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise InputError("features and labels differ in length")
        if self.n_classes is None:
            k = int(self.labels.max()) + 1 if len(self.labels) else 0
            object.__setattr__(self, "n_classes", k)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.n_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes).astype(np.int64)


@dataclass(frozen=True)
class Partition:
    node_shards: Tuple[Tuple[int, ...], ...]
    mode: str
    alpha: Optional[float] = None

    @property
    def n_nodes(self) -> int:
        return len(self.node_shards)

    def shard(self, dataset: Dataset, node: int) -> Dataset:
        return dataset.subset(self.node_shards[node], f"{dataset.name}/node{node}")

    def histograms(self, dataset: Dataset) -> List[np.ndarray]:
        return [np.bincount(dataset.labels[list(s)], minlength=dataset.n_classes) for s in self.node_shards]


def make_blobs(K: int, per_class: int, d: int, spread: float, seed: int,
               center_scale: float = 1.0, name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters around seeded class centers.

    Centers are standard normal times ``center_scale``; rows are ordered by class.
    """
    if K < 2 or per_class < 1 or d < 1:
        raise InputError("need K >= 2, per_class >= 1, d >= 1")
    if not spread > 0:
        raise InputError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(K, d))
    feats = np.concatenate([c + spread * rng.normal(size=(per_class, d)) for c in centers])
    labels = np.repeat(np.arange(K), per_class)
    return Dataset(feats, labels, name, K)


def blob_centers(K: int, d: int, seed: int, center_scale: float = 1.0) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, center_scale, size=(K, d))


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified seeded split; each class keeps at least one training sample."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_test = min(int(round(test_fraction * len(idx))), len(idx) - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return dataset.subset(tr, f"{dataset.name}/train"), dataset.subset(te, f"{dataset.name}/test")


def partition_iid(dataset: Dataset, n_nodes: int, seed: int) -> Partition:
    if n_nodes < 1:
        raise InputError("n_nodes must be >= 1")
    if n_nodes > len(dataset):
        raise InputError(f"{n_nodes} nodes for {len(dataset)} samples")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    shards = tuple(tuple(int(i) for i in s) for s in np.array_split(perm, n_nodes))
    return Partition(shards, "iid")


def partition_dirichlet(dataset: Dataset, n_nodes: int, alpha: float, seed: int) -> Partition:
    """Per-class node proportions drawn from Dir(alpha); empty shards are resampled."""
    if not alpha > 0:
        raise InputError("alpha must be positive")
    if n_nodes < 1:
        raise InputError("n_nodes must be >= 1")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.n_classes)]
    for _ in range(MAX_DIRICHLET_RETRIES):
        shards: List[List[int]] = [[] for _ in range(n_nodes)]
        for idx in by_class:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_nodes, alpha))
            cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for node, part in enumerate(np.split(idx, cuts)):
                shards[node].extend(int(i) for i in part)
        if all(shards):
            return Partition(tuple(tuple(s) for s in shards), "dirichlet", float(alpha))
    raise ConfigurationError(
        f"could not give all {n_nodes} nodes data after {MAX_DIRICHLET_RETRIES} Dirichlet draws")


def fit_standardizer(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    if len(dataset) == 0:
        raise InputError("cannot standardize an empty dataset")
    return dataset.features.mean(axis=0), dataset.features.std(axis=0)


def preprocess(dataset: Dataset, stats: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    """Per-feature standardization; constant features map to zero.

    ``stats`` (mean, std) come from the training split; by default the
    dataset's own statistics are used.
    """
    if len(dataset) == 0:
        raise InputError("cannot preprocess an empty dataset")
    mean, std = stats if stats is not None else fit_standardizer(dataset)
    safe = np.where(std > 0, std, 1.0)
    feats = np.where(std > 0, (dataset.features - mean) / safe, 0.0)
    return Dataset(feats, dataset.labels, dataset.name, dataset.n_classes)


def distribution_discrepancy(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon distance (natural log) between two class histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InputError("histograms must cover the same classes")
    p = (p + JS_SMOOTHING) / (p + JS_SMOOTHING).sum()
    q = (q + JS_SMOOTHING) / (q + JS_SMOOTHING).sum()
    m = 0.5 * (p + q)
    js = 0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m))
    return math.sqrt(max(float(js), 0.0))


def write_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def read_csv(path, name: Optional[str] = None) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
            raise InputError(f"unexpected CSV header {header[:3]}...")
        rows = list(r)
    feats = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64)
    labels = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return Dataset(feats.reshape(len(rows), len(header) - 1), labels, name or path.stem)
