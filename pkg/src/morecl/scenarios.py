"""Desk-scale experiment presets shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import checkpoint, harness
from .harness import ExperimentConfig


def desk(seed: int, out, **overrides) -> ExperimentConfig:
    """16-dim, 10 classes in 5 tasks, well separated clusters, M=100."""
    base = ExperimentConfig(n_classes=10, dim=16, n_tasks=5, classes_per_task=2, memory=100,
                            separation=10.0, fwt_reference=False, out=str(out))
    return _with(base, seed, overrides)


def overlapping(seed: int, out, **overrides) -> ExperimentConfig:
    """Same shape as :func:`desk` with clusters close enough to be confused."""
    return desk(seed, out, **{"separation": 4.0, **overrides})


def bias(seed: int, out, back_update: bool = True, **overrides) -> ExperimentConfig:
    """Three 2-class tasks with overlapping clusters and M=60."""
    base = ExperimentConfig(n_classes=6, dim=16, n_tasks=3, classes_per_task=2, memory=60,
                            separation=4.0, fwt_reference=False, out=str(out))
    cfg = _with(base, seed, overrides)
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, back_update=back_update))


def _with(config: ExperimentConfig, seed: int, overrides: dict) -> ExperimentConfig:
    pairs = {k: str(v) for k, v in overrides.items()}
    pairs["seed"] = str(seed)
    return harness.apply_overrides(config, pairs)


def final_aca_both_rules(config: ExperimentConfig) -> tuple[float, float]:
    """Final ACA under the coefficient-weighted and the plain concatenation rule.

    Reads the last checkpoint of a finished run in ``config.out``; nothing is
    written.
    """
    out = Path(config.out)
    record = harness.ExperimentRecord.load(out / "record.json")
    bench = harness.load_benchmark(config)
    model, _, stats = checkpoint.load(out / record.checkpoints[-1])
    model.s_default = config.train.s_max
    t = len(record.checkpoints)
    result = []
    for rule in ("final", "base"):
        recs = harness.evaluate_step(model, stats, bench, t, dataclasses.replace(config, prediction=rule))
        # pooled accuracy over every seen test sample
        result.append(100.0 * float(np.mean([r.correct for r in recs if r.true_task < t])))
    return result[0], result[1]


def mean(xs) -> float:
    return float(np.mean(xs))
