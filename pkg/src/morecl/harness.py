"""Experiment configuration, the end-to-end task loop, persistence and reports.

Configuration files hold one ``key = value`` pair per line; ``#`` starts a
comment. Keys are the field names of :class:`ExperimentConfig` and
:class:`~morecl.trainer.TrainConfig`:

    source            synthetic | features
    train_features    path of the training feature file (source=features)
    test_features     path of the test feature file (source=features)
    n_classes, dim, train_per_class, test_per_class, separation, scale, data_seed
                      synthetic benchmark; data_seed=none follows seed
    n_tasks, classes_per_task
    memory            replay budget M
    hidden_dims       comma-separated adapter widths, e.g. 128,128
    projection_dim    0 keeps features as-is, otherwise a fixed random projection
    class_order_seed  none follows seed
    prediction        final | base
    squared_md        use squared Mahalanobis distance in the coefficient
    c, md_floor       coefficient constants
    fwt_reference     train single-task reference models for forward transfer
    out               output directory
    epochs, lr, momentum, batch_size, lam, s_max, anneal, clamp,
    back_update, back_epochs, back_lr, back_batch, seed
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import FeatureSet, SyntheticSpec, generate_synthetic, load_features, make_class_order
from .distance import CoefficientConfig
from .evaluator import (AccuracyMatrix, PredictionRecord, auc, metric_report, predict_base,
                        predict_final, read_prediction_log, records_from, write_prediction_log,
                        write_report)
from .hatnet import AdapterModel, RandomProjection
from .memory import ReplayMemory
from .trainer import TaskDataset, TrainConfig, back_update, split_by_task, train_task

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, task: int | None, cause: BaseException):
        where = f" at task {task}" if task is not None else ""
        super().__init__(f"{stage}{where}: {cause}")
        self.stage = stage
        self.task = task


@dataclass
class ExperimentConfig:
    source: str = "synthetic"
    train_features: str = ""
    test_features: str = ""
    n_classes: int = 10
    dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 10.0
    scale: float = 1.0
    data_seed: typing.Optional[int] = None
    n_tasks: int = 5
    classes_per_task: int = 2
    memory: int = 100
    hidden_dims: typing.Tuple[int, ...] = (128, 128)
    projection_dim: int = 0
    class_order_seed: typing.Optional[int] = None
    prediction: str = "final"
    squared_md: bool = False
    c: float = 20.0
    md_floor: float = 1e-12
    fwt_reference: bool = True
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self, total_classes: int | None = None):
        if self.source not in ("synthetic", "features"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.prediction not in ("final", "base"):
            raise ConfigError(f"unknown prediction mode {self.prediction!r}")
        total = self.n_classes if total_classes is None else total_classes
        if self.n_tasks * self.classes_per_task > total:
            raise ConfigError(f"{self.n_tasks} tasks x {self.classes_per_task} classes exceeds {total} classes")
        if self.memory < self.n_tasks * self.classes_per_task:
            raise ConfigError(f"memory {self.memory} cannot hold one sample per class seen")

    def coefficient_config(self) -> CoefficientConfig:
        return CoefficientConfig(c=self.c, md_floor=self.md_floor, squared=self.squared_md)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        train = TrainConfig(**d.pop("train", {}))
        d["hidden_dims"] = tuple(d.get("hidden_dims", (128, 128)))
        return cls(train=train, **d)


# ---------------------------------------------------------------- config files


def _parse_value(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        if raw.lower() in ("none", ""):
            return None
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
        origin = typing.get_origin(tp)
    if origin in (tuple, typing.Tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return tp(raw)


_EXP_TYPES = typing.get_type_hints(ExperimentConfig)
_TRAIN_TYPES = typing.get_type_hints(TrainConfig)


def apply_overrides(config: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    exp, train = {}, {}
    for key, raw in pairs.items():
        try:
            if key in _TRAIN_TYPES:
                train[key] = _parse_value(raw, _TRAIN_TYPES[key])
            elif key in _EXP_TYPES and key != "train":
                exp[key] = _parse_value(raw, _EXP_TYPES[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return dataclasses.replace(config, train=dataclasses.replace(config.train, **train), **exp)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        if f.name == "train":
            continue
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {_format_value(v)}")
    for f in dataclasses.fields(config.train):
        lines.append(f"{f.name} = {_format_value(getattr(config.train, f.name))}")
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------- data


@dataclass
class Benchmark:
    train: FeatureSet
    test: FeatureSet
    task_classes: list[list[int]]


def synthetic_spec(config: ExperimentConfig) -> SyntheticSpec:
    seed = config.seed if config.data_seed is None else config.data_seed
    return SyntheticSpec(config.n_classes, config.dim, config.train_per_class, config.test_per_class,
                         config.separation, config.scale, seed)


def load_benchmark(config: ExperimentConfig) -> Benchmark:
    if config.source == "synthetic":
        train, test = generate_synthetic(synthetic_spec(config))
    else:
        train, test = load_features(config.train_features), load_features(config.test_features)
        if train.X.shape[1] != test.X.shape[1]:
            raise ConfigError("train and test feature dimensions differ")
    if config.projection_dim:
        proj = RandomProjection(train.X.shape[1], config.projection_dim, config.seed)
        train = FeatureSet(proj(train.X), train.y, train.n_classes)
        test = FeatureSet(proj(test.X), test.y, test.n_classes)
    n_total = train.n_classes
    config.validate(n_total)
    order_seed = config.seed if config.class_order_seed is None else config.class_order_seed
    order = make_class_order(n_total, order_seed)
    cpt = config.classes_per_task
    tasks = [order[k * cpt:(k + 1) * cpt] for k in range(config.n_tasks)]
    return Benchmark(train, test, tasks)


# ---------------------------------------------------------------- record


@dataclass
class ExperimentRecord:
    config: dict
    task_classes: list[list[int]]
    accuracy: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    auc_per_step: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    epoch_losses: list[list[float]] = field(default_factory=list)
    reference: list = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    prediction_logs: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def completed(self) -> int:
        return len(self.accuracy.acc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        d = dict(d)
        d["accuracy"] = AccuracyMatrix(**d["accuracy"])
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- evaluation


def task_of_labels(task_classes, y) -> np.ndarray:
    lookup = {c: k for k, cs in enumerate(task_classes) for c in cs}
    return np.array([lookup.get(int(c), -1) for c in y], dtype=np.int64)


def evaluate_step(model, stats, bench: Benchmark, t: int, config: ExperimentConfig) -> list[PredictionRecord]:
    """Predict every test sample of the benchmark's tasks with the first ``t`` heads."""
    tasks = task_of_labels(bench.task_classes, bench.test.y)
    keep = tasks >= 0
    X, y, tasks = bench.test.X[keep], bench.test.y[keep], tasks[keep]
    if config.prediction == "base":
        pred = predict_base(model, X, t)
    else:
        pred = predict_final(model, stats, X, t, config.coefficient_config())
    return records_from(pred, y, tasks)


def step_metrics(records: list[PredictionRecord], t: int, n_tasks: int):
    """Per-task accuracy row and, when future tasks exist, the AUC for step ``t``."""
    row, sizes = [], []
    for i in range(t):
        hits = [r.correct for r in records if r.true_task == i]
        row.append(100.0 * sum(hits) / len(hits))
        sizes.append(len(hits))
    step_auc = None
    if t < n_tasks:
        ind = [r.score for r in records if r.true_task < t]
        ood = [r.score for r in records if r.true_task >= t]
        step_auc = auc(ind, ood)
    return row, sizes, step_auc


def reference_accuracy(bench: Benchmark, k: int, config: ExperimentConfig) -> float:
    """Accuracy of a model trained on task ``k`` alone, without replay."""
    classes = bench.task_classes[k]
    sel = np.isin(bench.train.y, classes)
    data = TaskDataset(bench.train.X[sel], bench.train.y[sel], 0, classes)
    model = AdapterModel(bench.train.X.shape[1], config.hidden_dims, config.seed + 7919 * (k + 1))
    train_task(model, data, None, config.train)
    sel_te = np.isin(bench.test.y, classes)
    pred = predict_base(model, bench.test.X[sel_te], 1)
    return 100.0 * float(np.mean(pred.classes == bench.test.y[sel_te]))


# ---------------------------------------------------------------- task loop


def _ckpt_path(out: Path, k: int) -> Path:
    return out / f"checkpoint_task{k}.bin"


def _log_path(out: Path, k: int) -> Path:
    return out / f"predictions_task{k}.jsonl"


def run_experiment(config: ExperimentConfig, resume: bool = False,
                   stop_after: int | None = None) -> ExperimentRecord:
    """Train every task in order, checkpointing and evaluating after each one.

    With ``resume`` the loop restarts after the last checkpointed task found
    in ``config.out``. ``stop_after`` ends the loop early after that task index.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        bench = load_benchmark(config)
    except Exception as exc:
        raise ExperimentError("load", None, exc) from exc
    d = bench.train.X.shape[1]
    state = out / "state.json"

    record = None
    if resume and state.exists():
        record = ExperimentRecord.load(state)
        if record.config != config.to_dict():
            raise ExperimentError("resume", None, ConfigError("stored config differs from requested config"))
    if record is not None and record.completed:
        model, memory, stats = checkpoint.load(_ckpt_path(out, record.completed - 1))
        model.s_default = config.train.s_max
    else:
        record = ExperimentRecord(config.to_dict(), bench.task_classes)
        model = AdapterModel(d, config.hidden_dims, config.seed)
        memory = ReplayMemory(config.memory, d, config.seed)
        stats = []

    train_sets = split_by_task(bench.train.X, bench.train.y, bench.task_classes)
    for k in range(record.completed, config.n_tasks):
        t0 = time.perf_counter()
        stage = "train"
        try:
            task_log = train_task(model, train_sets[k], memory, config.train)
            stats.append(task_log.stats)
            if config.train.back_update and k > 0:
                stage = "back_update"
                back_update(model, memory, train_sets[k], config.train)
            stage = "checkpoint"
            ckpt = _ckpt_path(out, k)
            checkpoint.save(ckpt, model, memory, stats)
            stage = "evaluate"
            records = evaluate_step(model, stats, bench, k + 1, config)
            write_prediction_log(_log_path(out, k), records)
            row, sizes, step_auc = step_metrics(records, k + 1, config.n_tasks)
            stage = "reference"
            ref = None
            if config.fwt_reference and k > 0:
                ref = reference_accuracy(bench, k, config)
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError(stage, k, exc) from exc
        record.accuracy.add_step(row, sizes)
        if step_auc is not None:
            record.auc_per_step.append(step_auc)
        record.train_accuracy.append(task_log.train_accuracy)
        record.epoch_losses.append(task_log.epoch_losses)
        record.reference.append(ref)
        record.checkpoints.append(ckpt.name)
        record.prediction_logs.append(_log_path(out, k).name)
        record.wall_time.append(time.perf_counter() - t0)
        record.save(state)
        log.info("task %d: acc row %s auc %s", k, [round(a, 2) for a in row], step_auc)
        if stop_after is not None and k >= stop_after:
            return record

    finalize(record, out)
    return record


def finalize(record: ExperimentRecord, out: Path):
    final = read_prediction_log(out / record.prediction_logs[-1])
    n_tasks = len(record.task_classes)
    seen = [r for r in final if r.true_task < record.completed]
    ref = record.reference if any(r is not None for r in record.reference) else None
    record.metrics = metric_report(record.accuracy, record.auc_per_step, seen, ref)
    record.metrics["n_tasks"] = n_tasks
    record.save(out / "state.json")
    record.save(out / "record.json")
    write_report(out / "metrics.json", record.metrics)


def recompute_from_logs(out) -> ExperimentRecord:
    """Rebuild accuracy matrix and metrics from the per-step prediction logs."""
    out = Path(out)
    record = ExperimentRecord.load(out / "state.json")
    n_tasks = len(record.task_classes)
    matrix, aucs = AccuracyMatrix(), []
    for k, name in enumerate(record.prediction_logs):
        row, sizes, step_auc = step_metrics(read_prediction_log(out / name), k + 1, n_tasks)
        matrix.add_step(row, sizes)
        if step_auc is not None:
            aucs.append(step_auc)
    record.accuracy, record.auc_per_step = matrix, aucs
    finalize(record, out)
    return record


def rescore(config: ExperimentConfig) -> ExperimentRecord:
    """Re-predict from saved checkpoints (e.g. with another prediction rule)."""
    out = Path(config.out)
    record = ExperimentRecord.load(out / "state.json")
    bench = load_benchmark(config)
    for k, name in enumerate(record.checkpoints):
        model, _, stats = checkpoint.load(out / name)
        model.s_default = config.train.s_max
        write_prediction_log(_log_path(out, k), evaluate_step(model, stats, bench, k + 1, config))
    return recompute_from_logs(out)


# ---------------------------------------------------------------- reports


def format_table(metrics: dict) -> str:
    cols = ["ACA", "AIA", "Reduction", "AUC", "IAUC"]
    auc_last = metrics["auc_per_step"][-1] if metrics["auc_per_step"] else None
    vals = [metrics["aca"], metrics["aia"], metrics["reduction_rate"],
            None if auc_last is None else 100 * auc_last,
            None if metrics["iauc"] is None else 100 * metrics["iauc"]]
    cells = ["-" if v is None else f"{v:.2f}" for v in vals]
    widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
    head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
    return f"{head}\n{body}\n"


def report(record: ExperimentRecord, mode: str, out) -> list[Path]:
    out = Path(out)
    m = record.metrics
    written = []
    if mode in ("json", "all"):
        write_report(out / "metrics.json", m)
        written.append(out / "metrics.json")
    if mode in ("table", "all"):
        (out / "table.txt").write_text(format_table(m))
        written.append(out / "table.txt")
    if mode in ("csv", "all"):
        path = out / "curve.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "aca", "a_init", "auc"])
            a_init = record.accuracy.a_init
            for k, value in enumerate(m["aca_per_step"]):
                step_auc = m["auc_per_step"][k] if k < len(m["auc_per_step"]) else ""
                w.writerow([k + 1, value, a_init[k], step_auc])
        written.append(path)
    if not written:
        raise ValueError(f"unknown report mode {mode!r}")
    return written
