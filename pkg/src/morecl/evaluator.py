"""Task-free prediction, continual-learning metrics and OOD-detection metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import gradcore as gc
from .distance import CoefficientConfig, TaskStats, coefficient
from .hatnet import AdapterModel


class MissingStatsError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class PredictionRecord:
    true_class: int
    true_task: int
    pred_class: int
    pred_task: int
    score: float
    correct: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Predictions:
    classes: np.ndarray     # predicted global class ids
    tasks: np.ndarray       # task owning the predicted class
    combined: np.ndarray    # (n, n_seen_classes) concatenated head blocks
    scores: np.ndarray      # max of each combined row


@dataclass
class AccuracyMatrix:
    """``acc[k][i]``: accuracy (%) on task i's test set after training task k."""

    acc: list[list[float]] = field(default_factory=list)
    sizes: list[int] = field(default_factory=list)

    def add_step(self, row: Sequence[float], sizes: Sequence[int]):
        if len(row) != len(self.acc) + 1:
            raise ValueError("a step row must cover every task learned so far")
        self.acc.append([float(a) for a in row])
        self.sizes = [int(n) for n in sizes]

    @property
    def a_init(self) -> list[float]:
        return [self.acc[k][k] for k in range(len(self.acc))]


# ---------------------------------------------------------------- prediction


def head_probabilities(model: AdapterModel, X, t: int) -> list[np.ndarray]:
    """Softmax of heads ``0..t-1`` without their ood column."""
    blocks = []
    for k in range(t):
        p = gc.softmax(model.forward(X, k)).data
        blocks.append(p[:, :-1])
    return blocks


def concat_argmax(blocks: Sequence[np.ndarray], task_classes: Sequence[Sequence[int]]) -> Predictions:
    combined = np.concatenate([np.atleast_2d(b) for b in blocks], axis=1)
    ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in task_classes])
    owner = np.concatenate([np.full(len(c), k, dtype=np.int64) for k, c in enumerate(task_classes)])
    col = combined.argmax(axis=1)   # first maximum wins ties
    return Predictions(ids[col], owner[col], combined, combined[np.arange(len(col)), col])


def predict_base(model: AdapterModel, X, t: int) -> Predictions:
    if t < 1:
        raise ValueError("need at least one learned task")
    return concat_argmax(head_probabilities(model, X, t), model.task_classes[:t])


def coefficients(model: AdapterModel, stats: Sequence[TaskStats], X, t: int,
                 config: CoefficientConfig | None = None) -> np.ndarray:
    if len(stats) < t:
        raise MissingStatsError(f"statistics for {len(stats)} tasks, need {t}")
    out = []
    for k in range(t):
        Z = model.features(X, k, model.s_default).data
        out.append(coefficient(Z, stats[k], config))
    return np.stack(out, axis=1)


def predict_final(model: AdapterModel, stats: Sequence[TaskStats], X, t: int,
                  config: CoefficientConfig | None = None) -> Predictions:
    """Each head's block scaled by its distance coefficient before the argmax."""
    coef = coefficients(model, stats, X, t, config)
    blocks = [b * coef[:, [k]] for k, b in enumerate(head_probabilities(model, X, t))]
    return concat_argmax(blocks, model.task_classes[:t])


def records_from(pred: Predictions, true_classes, true_tasks) -> list[PredictionRecord]:
    return [PredictionRecord(int(c), int(tt), int(pc), int(pt), float(s), bool(c == pc))
            for c, tt, pc, pt, s in zip(true_classes, true_tasks, pred.classes, pred.tasks, pred.scores)]


# ---------------------------------------------------------------- CIL metrics


def aca(matrix: AccuracyMatrix, k: int) -> float:
    """Pooled accuracy over the test samples of tasks ``0..k`` after task ``k``."""
    row = matrix.acc[k]
    sizes = np.asarray(matrix.sizes[:k + 1], dtype=np.float64)
    return float(np.dot(row, sizes) / sizes.sum())


def aia(aca_per_step: Sequence[float]) -> float:
    if not len(aca_per_step):
        raise MetricError("no steps to average")
    return float(np.mean(aca_per_step))


def reduction_rate(matrix: AccuracyMatrix, t: int | None = None) -> float:
    """Mean drop from just-learned accuracy to accuracy after step ``t`` (1-based count)."""
    t = len(matrix.acc) if t is None else t
    if t < 2:
        raise MetricError("reduction rate needs at least two tasks")
    final = matrix.acc[t - 1]
    init = matrix.a_init
    return float(sum(init[k] - final[k] for k in range(t - 1)) / (t - 1))


def fwt(a_init: Sequence[float], reference: Sequence[float | None]) -> float:
    """Mean of ``a_init[k] - reference[k]`` over every task except the first."""
    if len(reference) < len(a_init) or any(r is None for r in reference[1:len(a_init)]):
        raise MetricError("missing single-task reference accuracies")
    diffs = [a_init[k] - reference[k] for k in range(1, len(a_init))]
    if not diffs:
        raise MetricError("forward transfer needs at least two tasks")
    return float(np.mean(diffs))


# ---------------------------------------------------------------- OOD metrics


def auc(ind_scores, ood_scores) -> float:
    """P(ind > ood) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    ind = np.asarray(ind_scores, dtype=np.float64).ravel()
    ood = np.asarray(ood_scores, dtype=np.float64).ravel()
    if len(ind) == 0 or len(ood) == 0:
        raise MetricError("AUC needs nonempty IND and OOD score lists")
    ranks = rankdata(np.concatenate([ind, ood]))
    n1, n2 = len(ind), len(ood)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def iauc(auc_per_step: Sequence[float]) -> float:
    if not len(auc_per_step):
        raise MetricError("no AUC steps to average")
    return float(np.mean(auc_per_step))


@dataclass
class BiasDiagnostic:
    earlier_fraction: float
    later_fraction: float
    n_cross_task: int
    no_cross_task_errors: bool


def bias_diagnostic(records: Iterable[PredictionRecord]) -> BiasDiagnostic:
    """Where cross-task mistakes land: earlier or later tasks than the truth."""
    earlier = later = 0
    for r in records:
        if r.correct or r.pred_task == r.true_task:
            continue
        if r.pred_task < r.true_task:
            earlier += 1
        else:
            later += 1
    n = earlier + later
    if n == 0:
        return BiasDiagnostic(0.0, 0.0, 0, True)
    return BiasDiagnostic(earlier / n, later / n, n, False)


# ---------------------------------------------------------------- files


def write_prediction_log(path, records: Iterable[PredictionRecord]):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_prediction_log(path) -> list[PredictionRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(PredictionRecord(**json.loads(line)))
    return out


def metric_report(matrix: AccuracyMatrix, auc_per_step: Sequence[float],
                  final_records: Sequence[PredictionRecord],
                  reference: Sequence[float | None] | None = None) -> dict:
    steps = len(matrix.acc)
    aca_steps = [aca(matrix, k) for k in range(steps)]
    try:
        fwt_value = fwt(matrix.a_init, reference) if reference is not None else None
    except MetricError:
        fwt_value = None
    return {
        "aca": aca_steps[-1],
        "aca_per_step": aca_steps,
        "aia": aia(aca_steps),
        "reduction_rate": reduction_rate(matrix) if steps >= 2 else None,
        "fwt": fwt_value,
        "auc_per_step": list(auc_per_step),
        "iauc": iauc(auc_per_step) if len(auc_per_step) else None,
        "bias_diagnostic": asdict(bias_diagnostic(final_records)),
        "accuracy_matrix": matrix.acc,
    }


def write_report(path, report: dict):
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
