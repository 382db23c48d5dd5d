"""Experiment configuration, evaluation and seeded experiment matrices.

Config files are TOML.  Top-level keys select the matrix axes; tables hold
the settings shared by every cell::

    schema_version = 1
    frameworks  = ["snake", "fedavg"]         # snake | fedavg | accel_fl
    partitions  = ["iid", "dirichlet"]
    order_modes = ["sequential"]              # sequential | reverse | random
    epochs      = [1]
    seeds       = [0, 1, 2, 3, 4]

    [dataset]    classes, train_per_class, test_per_class, dim, spread, center_scale, seed
    [model]      hidden, layers
    [nodes]      count, spares, capabilities, min_capability
    [partition]  alpha
    [snake]      cycles, mode, parallel_replicas
    [baselines]  rounds
    [trainer]    batch_size, base_lr, cycle_decay, clip_norm, optimizer,
                 kd (auto | on | off), kd_weight, kd_temperature, kd_threshold,
                 quantize_frozen
    [exit]       max_epochs, metric_threshold, min_improvement, patience
    [[failures]] cycle, layer, at_fraction, node_id

Unknown keys are rejected.  ``SNAKESIM_SEED`` supplies the seed list when the
file has none.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import re
import statistics
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tomli
import tomli_w

from . import accounting, baselines, data, nncore, orchestrator, trainer
from .errors import InputError
from .orchestrator import RunTrace

SCHEMA_VERSION = 1
FRAMEWORKS = ("snake", "fedavg", "accel_fl")
PARTITIONS = ("iid", "dirichlet")
HANDOFF_MODES = (accounting.CS, accounting.P2P)
RELATIVE_ACCURACY_FLOOR = 0.95


# ---------------------------------------------------------------- config model


@dataclass
class DatasetSpec:
    classes: int = 4
    train_per_class: int = 1000
    test_per_class: int = 250
    dim: int = 16
    spread: float = 2.0
    center_scale: float = 1.0
    seed: Optional[int] = None


@dataclass
class ModelSpec:
    hidden: int = 32
    layers: int = 11


@dataclass
class NodeSpec:
    count: int = 9
    spares: int = 0
    capabilities: List[float] = field(default_factory=list)
    min_capability: float = 0.0


@dataclass
class PartitionSpec:
    alpha: float = 2.0


@dataclass
class SnakeSpec:
    cycles: int = 10
    mode: str = accounting.CS
    parallel_replicas: int = 1


@dataclass
class BaselineSpec:
    rounds: int = 10


@dataclass
class TrainerSpec:
    batch_size: int = 32
    base_lr: Optional[float] = None
    cycle_decay: float = 0.7
    clip_norm: float = 1.0
    optimizer: str = "sgd"
    kd: str = "auto"
    kd_weight: float = 0.5
    kd_temperature: float = 2.0
    kd_threshold: float = trainer.DEFAULT_KD_THRESHOLD
    quantize_frozen: bool = False


@dataclass
class ExitSpec:
    max_epochs: Optional[int] = None
    metric_threshold: Optional[float] = None
    min_improvement: Optional[float] = None
    patience: int = 3


@dataclass
class FailureEntry:
    cycle: int = 0
    layer: int = 2
    at_fraction: float = 0.5
    node_id: Optional[int] = None


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    frameworks: List[str] = field(default_factory=lambda: ["snake", "fedavg"])
    partitions: List[str] = field(default_factory=lambda: ["iid", "dirichlet"])
    order_modes: List[str] = field(default_factory=lambda: ["sequential"])
    epochs: List[int] = field(default_factory=lambda: [1])
    seeds: List[int] = field(default_factory=lambda: [0])
    output: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    nodes: NodeSpec = field(default_factory=NodeSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    snake: SnakeSpec = field(default_factory=SnakeSpec)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    trainer: TrainerSpec = field(default_factory=TrainerSpec)
    exit: Optional[ExitSpec] = None
    failures: List[FailureEntry] = field(default_factory=list)

    def train_config(self, epochs: int) -> trainer.TrainConfig:
        t = self.trainer
        lr = t.base_lr if t.base_lr is not None else (0.05 if t.optimizer == "sgd" else 0.001)
        return trainer.TrainConfig(epochs=epochs, batch_size=t.batch_size, base_lr=lr, cycle_decay=t.cycle_decay,
                                   clip_norm=t.clip_norm, optimizer=t.optimizer, quantize_frozen=t.quantize_frozen,
                                   kd=trainer.KDConfig(t.kd_weight, t.kd_temperature))

    def graph(self) -> nncore.LayerGraph:
        return nncore.mlp_graph(self.dataset.dim, self.model.hidden, self.dataset.classes, self.model.layers)


@dataclass
class ConfigIssue:
    line: Optional[int]
    field: str
    message: str

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.field}: {self.message}"


class ConfigError(InputError):
    def __init__(self, issues: Sequence[ConfigIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


# ---------------------------------------------------------------- parsing


_HEADER = re.compile(r"^\s*\[\[?\s*([A-Za-z0-9_.]+)\s*\]\]?\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _key_lines(text: str) -> Dict[str, int]:
    """First line number of every ``table.key`` (and table header) in the text."""
    out: Dict[str, int] = {}
    table = ""
    counts: Dict[str, int] = {}
    for no, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            table = m.group(1)
            if line.strip().startswith("[["):
                counts[table] = counts.get(table, -1) + 1
                table = f"{table}[{counts[table]}]"
            out.setdefault(table, no)
            continue
        m = _KEY.match(line)
        if m:
            out.setdefault(f"{table}.{m.group(1)}" if table else m.group(1), no)
    return out


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin in (list, List):
        (inner,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if hint is bool:
        return isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is str:
        return isinstance(value, str)
    return False


def _type_name(hint) -> str:
    if typing.get_origin(hint) is typing.Union:
        return " or ".join(_type_name(h) for h in typing.get_args(hint) if h is not type(None))
    if typing.get_origin(hint) in (list, List):
        return f"list of {_type_name(typing.get_args(hint)[0])}"
    return getattr(hint, "__name__", str(hint))


def _build(cls, raw: Dict[str, Any], prefix: str, lines: Dict[str, int], issues: List[ConfigIssue]):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        line = lines.get(path) or lines.get(prefix)
        if key not in hints:
            issues.append(ConfigIssue(line, path, "unknown key"))
            continue
        hint = hints[key]
        nested = _nested_type(hint)
        if nested is not None and dataclasses.is_dataclass(nested):
            if typing.get_origin(hint) in (list, List):
                if not isinstance(value, list):
                    issues.append(ConfigIssue(line, path, "expected an array of tables"))
                    continue
                kwargs[key] = [_build(nested, v, f"{path}[{i}]", lines, issues) for i, v in enumerate(value)]
            elif isinstance(value, dict):
                kwargs[key] = _build(nested, value, path, lines, issues)
            else:
                issues.append(ConfigIssue(line, path, "expected a table"))
            continue
        if not _type_ok(value, hint):
            issues.append(ConfigIssue(line, path, f"expected {_type_name(hint)}, got {type(value).__name__}"))
            continue
        if hint is float or (typing.get_origin(hint) is typing.Union and float in typing.get_args(hint)):
            value = float(value) if value is not None else None
        if typing.get_origin(hint) in (list, List) and typing.get_args(hint)[0] is float:
            value = [float(v) for v in value]
        kwargs[key] = value
    return cls(**kwargs)


def _nested_type(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    if len(args) == 1 and dataclasses.is_dataclass(args[0]):
        return args[0]
    return None


def _constraints(cfg: ExperimentConfig) -> List[Tuple[str, str]]:
    bad: List[Tuple[str, str]] = []

    def need(ok, path, msg):
        if not ok:
            bad.append((path, msg))

    need(cfg.schema_version == SCHEMA_VERSION, "schema_version", f"unsupported version (expected {SCHEMA_VERSION})")
    for name, values, allowed in (("frameworks", cfg.frameworks, FRAMEWORKS),
                                  ("partitions", cfg.partitions, PARTITIONS),
                                  ("order_modes", cfg.order_modes, orchestrator.ORDER_MODES)):
        need(bool(values), name, "must not be empty")
        for v in values:
            need(v in allowed, name, f"{v!r} not one of {', '.join(allowed)}")
    need(bool(cfg.epochs) and all(e >= 1 for e in cfg.epochs), "epochs", "each value must be >= 1")
    need(bool(cfg.seeds), "seeds", "must not be empty")
    d = cfg.dataset
    need(d.classes >= 2, "dataset.classes", "must be >= 2")
    need(d.train_per_class >= 1, "dataset.train_per_class", "must be >= 1")
    need(d.test_per_class >= 1, "dataset.test_per_class", "must be >= 1")
    need(d.dim >= 1, "dataset.dim", "must be >= 1")
    need(d.spread > 0, "dataset.spread", "must be > 0")
    need(cfg.model.hidden >= 1, "model.hidden", "must be >= 1")
    need(cfg.model.layers >= 3, "model.layers", "must be >= 3")
    n = cfg.nodes
    need(n.count >= 1, "nodes.count", "must be >= 1")
    need(n.spares >= 0, "nodes.spares", "must be >= 0")
    need(not n.capabilities or len(n.capabilities) == n.count + n.spares, "nodes.capabilities",
         "needs one entry per node (count + spares)")
    need(all(c > 0 for c in n.capabilities), "nodes.capabilities", "every capability must be > 0")
    need(cfg.partition.alpha > 0, "partition.alpha", "must be > 0")
    s = cfg.snake
    need(s.cycles >= 1, "snake.cycles", "must be >= 1")
    need(s.mode in HANDOFF_MODES, "snake.mode", f"not one of {', '.join(HANDOFF_MODES)}")
    need(s.parallel_replicas >= 1, "snake.parallel_replicas", "must be >= 1")
    need(s.parallel_replicas == 1 or s.mode == accounting.CS, "snake.parallel_replicas",
         "parallel replicas need client-server mode")
    need(cfg.baselines.rounds >= 1, "baselines.rounds", "must be >= 1")
    t = cfg.trainer
    need(t.batch_size >= 1, "trainer.batch_size", "must be >= 1")
    need(t.base_lr is None or t.base_lr >= 0, "trainer.base_lr", "must be >= 0")
    need(0 < t.cycle_decay <= 1, "trainer.cycle_decay", "must lie in (0, 1]")
    need(t.clip_norm > 0, "trainer.clip_norm", "must be > 0")
    need(t.optimizer in ("sgd", "adam"), "trainer.optimizer", "not one of sgd, adam")
    need(t.kd in ("auto", "on", "off"), "trainer.kd", "not one of auto, on, off")
    need(t.kd_weight >= 0, "trainer.kd_weight", "must be >= 0")
    need(t.kd_temperature > 0, "trainer.kd_temperature", "must be > 0")
    need(t.kd_threshold >= 0, "trainer.kd_threshold", "must be >= 0")
    for i, f in enumerate(cfg.failures):
        p = f"failures[{i}]"
        need(0 <= f.cycle < s.cycles, f"{p}.cycle", "outside the configured cycles")
        need(2 <= f.layer <= cfg.model.layers - 1, f"{p}.layer", "must be a middle layer")
        need(0 <= f.at_fraction < 1, f"{p}.at_fraction", "must lie in [0, 1)")
    if cfg.exit is not None:
        need(cfg.exit.patience >= 1, "exit.patience", "must be >= 1")
    return bad


def parse_config(text: str, env: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    """Parse and validate a TOML config; raises :class:`ConfigError` listing every problem."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = min(getattr(exc, "lineno", 0), max(len(text.splitlines()), 1)) or None
        raise ConfigError([ConfigIssue(line, "<syntax>", getattr(exc, "msg", str(exc)))]) from None
    env = os.environ if env is None else env
    if "seeds" not in raw and env.get("SNAKESIM_SEED"):
        try:
            raw["seeds"] = [int(env["SNAKESIM_SEED"])]
        except ValueError:
            raise ConfigError([ConfigIssue(None, "SNAKESIM_SEED", "must be an integer")]) from None
    lines = _key_lines(text)
    issues: List[ConfigIssue] = []
    cfg = _build(ExperimentConfig, raw, "", lines, issues)
    if not issues:
        for path, msg in _constraints(cfg):
            issues.append(ConfigIssue(lines.get(path) or lines.get(path.split(".")[0]), path, msg))
    else:
        # type errors first; constraint checks on defaults would only add noise
        try:
            issues.extend(ConfigIssue(lines.get(p) or lines.get(p.split(".")[0]), p, m)
                          for p, m in _constraints(cfg) if p not in {i.field for i in issues})
        except TypeError:
            pass
    if issues:
        raise ConfigError(issues)
    return cfg


def load_config(path, env: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), env)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


def dump_config(cfg: ExperimentConfig) -> str:
    plain = _to_plain(cfg)
    if not plain.get("failures"):
        plain.pop("failures", None)
    return tomli_w.dumps(plain)


# ---------------------------------------------------------------- evaluation


def evaluate(params: nncore.ParameterSet, graph: nncore.LayerGraph, test: data.Dataset) -> Dict[str, float]:
    if len(test) == 0:
        raise InputError("empty test set")
    logits, _ = nncore.forward(params, graph, test.features)
    loss, _ = nncore.softmax_xent(logits, test.labels)
    return {"accuracy": float(np.mean(logits.argmax(axis=1) == test.labels)), "loss": loss}


# ---------------------------------------------------------------- runs


@dataclass(frozen=True)
class Cell:
    framework: str
    partition: str
    order_mode: str
    epochs: int
    seed: int

    @property
    def key(self) -> str:
        order = self.order_mode if self.framework == "snake" else "-"
        return f"{self.framework}_{self.partition}_{order}_E{self.epochs}_s{self.seed}"


@dataclass
class RunReport:
    cell: Cell
    points: List[Dict[str, float]]
    final_hash: str
    peak_mem_bytes: int
    kd_active: bool
    trace: Optional[RunTrace] = None

    @property
    def final_accuracy(self) -> float:
        return self.points[-1]["test_accuracy"]

    @property
    def final_flops(self) -> int:
        return self.points[-1]["flops_total"]

    def accuracy_at_flops(self, budget: float) -> float:
        """Accuracy at the last evaluation point within ``budget`` cumulative FLOPs."""
        within = [p for p in self.points if p["flops_total"] <= budget]
        return (within[-1] if within else self.points[0])["test_accuracy"]

    def to_json(self) -> Dict[str, Any]:
        return {"cell": dataclasses.asdict(self.cell), "points": self.points, "final_hash": self.final_hash,
                "peak_mem_bytes": self.peak_mem_bytes, "kd_active": self.kd_active}

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> "RunReport":
        return cls(Cell(**d["cell"]), d["points"], d["final_hash"], d["peak_mem_bytes"], d["kd_active"])


@dataclass
class Setup:
    graph: nncore.LayerGraph
    train: data.Dataset
    test: data.Dataset
    partition: data.Partition
    nodes: List[orchestrator.NodeProfile]
    params: nncore.ParameterSet


def build_setup(cfg: ExperimentConfig, partition: str, seed: int) -> Setup:
    """Dataset, node shards and initial model for one seed; shared by all frameworks."""
    d = cfg.dataset
    ds_seed = d.seed if d.seed is not None else seed
    raw = data.make_blobs(d.classes, d.train_per_class + d.test_per_class, d.dim, d.spread, ds_seed, d.center_scale)
    train, test = data.train_test_split(raw, d.test_per_class / (d.train_per_class + d.test_per_class), ds_seed)
    stats = data.fit_standardizer(train)
    train, test = data.preprocess(train, stats), data.preprocess(test, stats)
    n_total = cfg.nodes.count + cfg.nodes.spares
    if partition == "iid":
        part = data.partition_iid(train, n_total, seed)
    else:
        part = data.partition_dirichlet(train, n_total, cfg.partition.alpha, seed)
    caps = cfg.nodes.capabilities or [1.0] * n_total
    nodes = [orchestrator.NodeProfile(i, part.shard(train, i), caps[i]) for i in range(n_total)]
    graph = cfg.graph()
    params = nncore.init_params(graph, np.random.default_rng(orchestrator._local_seed(seed, 7)))
    return Setup(graph, train, test, part, nodes, params)


def _points(trace: RunTrace) -> List[Dict[str, float]]:
    return [{"round_or_cycle": e.step, "sim_time": e.time, "bytes_up_total": e.bytes_up,
             "bytes_down_total": e.bytes_down, "flops_total": e.flops, "test_accuracy": e.accuracy,
             "test_loss": e.loss} for e in trace.evaluations]


def run_cell(cfg: ExperimentConfig, cell: Cell, setup: Optional[Setup] = None) -> RunReport:
    setup = setup or build_setup(cfg, cell.partition, cell.seed)
    graph = setup.graph
    tcfg = cfg.train_config(cell.epochs)

    def ev(p):
        r = evaluate(p, graph, setup.test)
        return r["accuracy"], r["loss"]

    admitted = orchestrator.admit_nodes(setup.nodes, orchestrator.AdmissionPolicy(cfg.nodes.min_capability)).admitted
    kd_on = False
    if cell.framework == "snake":
        t = cfg.trainer
        if t.kd == "on":
            kd_on = True
        elif t.kd == "auto" and len(admitted) >= 2:
            kd_on = trainer.should_activate_kd([n.shard.class_histogram() for n in admitted], t.kd_threshold)
        if not kd_on:
            tcfg = dataclasses.replace(tcfg, kd=None)
        schedule = orchestrator.assign_layers(admitted, graph, cell.order_mode, cfg.snake.cycles, cell.seed,
                                              cfg.snake.mode, cfg.snake.parallel_replicas)
        failures = [orchestrator.FailureSpec(f.cycle, f.layer, f.at_fraction, f.node_id) for f in cfg.failures]
        exit_cfg = orchestrator.ExitConfig(**dataclasses.asdict(cfg.exit)) if cfg.exit else None
        trace = orchestrator.run_snake(schedule, graph, setup.params, tcfg, admitted, failures, cell.seed, ev, exit_cfg)
    elif cell.framework == "fedavg":
        tcfg = dataclasses.replace(tcfg, kd=None, quantize_frozen=False)
        trace = baselines.run_fedavg(admitted[:cfg.nodes.count], graph, setup.params, tcfg,
                                     cfg.baselines.rounds, cell.seed, ev)
    else:
        tcfg = dataclasses.replace(tcfg, kd=None, quantize_frozen=False)
        trace = baselines.run_accel_fl(admitted[:cfg.nodes.count], graph, setup.params, tcfg,
                                       cfg.baselines.rounds, cell.seed, ev)
    points = _points(trace)
    peak = trace.ledger.peak_memory_bytes
    for p in points:
        p["peak_mem_bytes"] = peak
    return RunReport(cell, points, trace.final_params.digest(), peak, kd_on, trace)


def matrix_cells(cfg: ExperimentConfig) -> List[Cell]:
    cells = []
    for fw in cfg.frameworks:
        orders = cfg.order_modes if fw == "snake" else [cfg.order_modes[0]]
        for part in cfg.partitions:
            for order in orders:
                for e in cfg.epochs:
                    for s in cfg.seeds:
                        cells.append(Cell(fw, part, order, e, s))
    return cells


EXTRA_COLUMNS = ("partition", "order_mode", "epochs")


def summary_rows(reports: Sequence[RunReport]) -> List[Dict[str, Any]]:
    rows = []
    for r in reports:
        for p in r.points:
            rows.append({"framework": r.cell.framework, "seed": r.cell.seed, "partition": r.cell.partition,
                         "order_mode": r.cell.order_mode if r.cell.framework == "snake" else "-",
                         "epochs": r.cell.epochs, **p})
    return rows


def aggregate_csv(reports: Sequence[RunReport]) -> str:
    """Mean and standard deviation over seeds of the final point of every cell."""
    groups: Dict[Tuple, List[RunReport]] = {}
    for r in reports:
        c = r.cell
        groups.setdefault((c.framework, c.partition, c.order_mode if c.framework == "snake" else "-", c.epochs),
                          []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["framework", "partition", "order_mode", "epochs", "n_seeds", "final_accuracy_mean",
                "final_accuracy_std", "bytes_total_mean", "flops_total_mean"])
    for key in sorted(groups):
        rs = groups[key]
        acc = [r.final_accuracy for r in rs]
        byt = [r.points[-1]["bytes_up_total"] + r.points[-1]["bytes_down_total"] for r in rs]
        fl = [r.final_flops for r in rs]
        w.writerow([*key, len(rs), _f(statistics.fmean(acc)), _f(statistics.pstdev(acc)),
                    _f(statistics.fmean(byt)), _f(statistics.fmean(fl))])
    return buf.getvalue()


def _f(x: float) -> str:
    return repr(round(float(x), 12))


@dataclass
class MatrixResult:
    reports: List[RunReport]
    failed: Dict[str, str]
    summary_csv: str
    aggregate_csv: str
    checks: List[Tuple[str, bool, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed and all(ok for _, ok, _ in self.checks)


def reconcile(report: RunReport) -> bool:
    """Ledger totals and the last evaluation point must equal the trace sums."""
    t = report.trace
    sums = t.totals()
    led = t.ledger
    if (sums["bytes_up"], sums["bytes_down"], sums["flops"]) != (led.bytes_up, led.bytes_down, led.flops_total):
        return False
    if not report.points:
        return True
    last = report.points[-1]
    upto = [e for e in t.events if e.time <= last["sim_time"]]
    return (sum(e.bytes_up for e in upto), sum(e.bytes_down for e in upto), sum(e.flops for e in upto)) == \
        (last["bytes_up_total"], last["bytes_down_total"], last["flops_total"])


def relative_accuracy_checks(reports: Sequence[RunReport], floor: float = RELATIVE_ACCURACY_FLOOR,
                             order_mode: str = "sequential") -> List[Tuple[str, bool, str]]:
    """Snake final accuracy vs FedAvg accuracy at matched cumulative FLOPs, mean over seeds."""
    checks = []
    snake = [r for r in reports if r.cell.framework == "snake" and r.cell.order_mode == order_mode]
    fed = {(r.cell.partition, r.cell.epochs, r.cell.seed): r for r in reports if r.cell.framework == "fedavg"}
    groups: Dict[Tuple[str, int], List[Tuple[float, float]]] = {}
    for r in snake:
        f = fed.get((r.cell.partition, r.cell.epochs, r.cell.seed))
        if f is not None:
            groups.setdefault((r.cell.partition, r.cell.epochs), []).append(
                (r.final_accuracy, f.accuracy_at_flops(r.final_flops)))
    for (part, e), pairs in sorted(groups.items()):
        s = statistics.fmean(p[0] for p in pairs)
        f = statistics.fmean(p[1] for p in pairs)
        ok = s >= floor * f
        checks.append((f"relative-accuracy {part} E={e}", ok, f"snake {s:.4f} vs fedavg {f:.4f} (ratio {s / f:.4f})"))
    return checks


def run_matrix(cfg: ExperimentConfig, out_dir=None, check: bool = False) -> MatrixResult:
    """Run every cell; a failing cell is recorded and the rest still run."""
    reports, failed = [], {}
    setups: Dict[Tuple[str, int], Setup] = {}
    for cell in matrix_cells(cfg):
        try:
            key = (cell.partition, cell.seed)
            if key not in setups:
                setups[key] = build_setup(cfg, cell.partition, cell.seed)
            reports.append(run_cell(cfg, cell, setups[key]))
        except Exception as exc:  # noqa: BLE001 - a cell failure must not stop the matrix
            failed[cell.key] = f"{type(exc).__name__}: {exc}"
    summary = accounting.summary_csv(summary_rows(reports), EXTRA_COLUMNS)
    agg = aggregate_csv(reports)
    result = MatrixResult(reports, failed, summary, agg)
    if check:
        result.checks.extend((f"reconcile {r.cell.key}", reconcile(r), "") for r in reports)
        result.checks.extend(relative_accuracy_checks(reports))
    if out_dir is not None:
        write_outputs(result, cfg, Path(out_dir))
    return result


def write_outputs(result: MatrixResult, cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(result.summary_csv)
    (out / "aggregate.csv").write_text(result.aggregate_csv)
    (out / "config.toml").write_text(dump_config(cfg))
    for r in result.reports:
        d = out / "runs" / r.cell.key
        d.mkdir(parents=True, exist_ok=True)
        (d / "trace.jsonl").write_text(r.trace.to_jsonl())
        (d / "report.json").write_text(json.dumps(r.to_json(), indent=1, sort_keys=True) + "\n")
    if result.failed:
        (out / "failed.json").write_text(json.dumps(result.failed, indent=1, sort_keys=True) + "\n")


def load_reports(run_dir) -> List[RunReport]:
    """Reports under ``run_dir/runs``, each re-checked against its trace."""
    reports = []
    dirs = sorted(Path(run_dir, "runs").iterdir())
    cfg_path = Path(run_dir, "config.toml")
    if cfg_path.exists():
        # restore the matrix order the run was written in
        order = {c.key: i for i, c in enumerate(matrix_cells(load_config(cfg_path, env={})))}
        dirs.sort(key=lambda d: (order.get(d.name, len(order)), d.name))
    for d in dirs:
        rep = RunReport.from_json(json.loads((d / "report.json").read_text()))
        events = orchestrator.read_jsonl((d / "trace.jsonl").read_text())
        rep.trace = RunTrace(events=events)
        if rep.points:
            last = rep.points[-1]
            upto = [e for e in events if e.time <= last["sim_time"]]
            if sum(e.bytes_up + e.bytes_down for e in upto) != last["bytes_up_total"] + last["bytes_down_total"]:
                raise InputError(f"{d.name}: report totals disagree with trace.jsonl")
        reports.append(rep)
    return reports
