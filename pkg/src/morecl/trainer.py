"""Task-sequential training with replay samples as out-of-distribution data."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .distance import TaskStats, compute_stats
from .hatnet import AdapterModel, MaskConfig, anneal_s, mask_regularizer
from .memory import OODSampler, ReplayMemory

log = logging.getLogger(__name__)


class TaskExistsError(ValueError):
    pass


class ShortTaskDataWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    lam: float = 0.75
    s_max: float = 500.0
    anneal: bool = True
    clamp: float = 6.0
    back_update: bool = True
    back_epochs: int = 10
    back_lr: float = 0.01
    back_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.back_batch) < 1 or self.back_epochs < 0:
            raise ValueError("epochs and batch sizes must be positive")
        if not (0 < self.lr < 1 and 0 < self.back_lr < 1):
            raise ValueError("learning rates must lie in (0, 1)")

    @property
    def mask(self) -> MaskConfig:
        return MaskConfig(s_max=self.s_max, lam=self.lam, anneal=self.anneal, clamp=self.clamp)


@dataclass
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray          # global class ids
    task_id: int
    classes: list[int]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not set(np.unique(self.labels).tolist()) <= set(self.classes):
            raise ValueError("labels outside the task's class set")

    def __len__(self):
        return len(self.labels)

    def local_labels(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(c)] for c in self.labels], dtype=np.int64)


@dataclass
class TaskLog:
    task_id: int
    batch_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    stats: TaskStats | None = None


def ood_loss(model: AdapterModel, k: int, ind_x, ind_labels, ood_x, s: float, masks=None) -> gc.Tensor:
    """Cross-entropy of IND samples on their class and replay samples on the ood output.

    Both sums share one normalizer: the total number of rows in the batch.
    ``ind_labels`` are indices local to task ``k``.
    """
    ood_x = np.asarray(ood_x, dtype=np.float64).reshape(-1, model.input_dim)
    X = np.concatenate([np.asarray(ind_x, dtype=np.float64).reshape(-1, model.input_dim), ood_x])
    y = np.concatenate([np.asarray(ind_labels, dtype=np.int64),
                        np.full(len(ood_x), model.ood_index(k), dtype=np.int64)])
    return gc.cross_entropy(model.forward(X, k, s, masks), y)


def task_features(model: AdapterModel, X, k: int) -> np.ndarray:
    return model.features(X, k, model.s_default).data


def _compensate_embedding_grads(embeddings, s: float, cfg: MaskConfig):
    for e in embeddings:
        if e.grad is None:
            continue
        num = np.cosh(np.clip(s * e.data, -cfg.thres_cosh, cfg.thres_cosh)) + 1.0
        with np.errstate(over="ignore"):
            den = np.cosh(s * e.data) + 1.0
        e.grad = e.grad * (cfg.s_max / s) * num / den


def train_task(model: AdapterModel, data: TaskDataset, memory: ReplayMemory | None,
               config: TrainConfig, update_memory: bool = True) -> TaskLog:
    """Add and train head ``data.task_id`` in place.

    After the last epoch the task's mask is folded into the accumulated masks,
    Mahalanobis statistics are computed from the final features and the
    memory admits the task's classes.
    """
    if data.task_id < model.n_tasks:
        raise TaskExistsError(f"task {data.task_id} already trained")
    if data.task_id != model.n_tasks:
        raise ValueError(f"expected task {model.n_tasks}, got {data.task_id}")
    cfg = config.mask
    if model.n_tasks == 0:
        model.set_standardization(data.features)
    k = model.add_task(data.classes)
    model.s_default = cfg.s_max

    hooks = model.grad_hooks()
    opt = gc.SGD(model.task_parameters(k), config.lr, config.momentum)
    rng = np.random.default_rng([config.seed, 0x7A1, k])
    sampler = OODSampler(memory if memory is not None else ReplayMemory(0, model.input_dim), rng)
    y_local = data.local_labels()
    n = len(data)
    n_batches = -(-n // config.batch_size)
    record = TaskLog(k)

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for b in range(n_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            s = anneal_s(b + 1, n_batches, cfg.s_max) if cfg.anneal else cfg.s_max
            ood_x = sampler.next(config.batch_size)
            opt.zero_grad()
            with gc.Tape() as tape:
                masks = model.masks(k, s)
                loss = gc.add(ood_loss(model, k, data.features[idx], y_local[idx], ood_x, s, masks),
                              mask_regularizer(masks, model.cum_masks, cfg.lam))
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at task {k}, epoch {epoch}, batch {b}")
            tape.backward(loss, hooks)
            if cfg.anneal:
                _compensate_embedding_grads(model.embeddings[k], s, cfg)
            opt.step()
            for e in model.embeddings[k]:
                e.data = np.clip(e.data, -cfg.clamp, cfg.clamp)
            losses.append(value)
        record.batch_losses.extend(losses)
        record.epoch_losses.append(float(np.mean(losses)))
        log.debug("task %d epoch %d loss %.6f", k, epoch, record.epoch_losses[-1])

    model.accumulate(k, cfg.s_max)
    Z = task_features(model, data.features, k)
    logits = model.head(gc.Tensor(Z), k).data[:, :-1]
    record.train_accuracy = 100.0 * float(np.mean(logits.argmax(axis=1) == y_local))
    record.stats = compute_stats(k, Z, data.labels, data.classes)
    if update_memory and memory is not None:
        memory.update(data.features, data.labels, k)
    return record


def build_back_dataset(data: TaskDataset, memory: ReplayMemory, j: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IND/OOD sets for revisiting head ``j``.

    Returns ``(ind_x, ind_labels, ood_x)``: the memory entries of task ``j``
    (global labels), and ``memory.budget`` random rows of the current task's
    data stacked on every memory entry from other tasks.
    """
    ind = memory.of_task(j)
    n_new = memory.budget
    if len(data) < n_new:
        warnings.warn(f"current task has {len(data)} samples, fewer than the memory size {n_new}; using all",
                      ShortTaskDataWarning)
        n_new = len(data)
    pick = np.sort(rng.choice(len(data), size=n_new, replace=False))
    ood = np.concatenate([data.features[pick], memory.features[memory.not_of_task(j)]])
    return memory.features[ind], memory.labels[ind], ood


def back_update(model: AdapterModel, memory: ReplayMemory, data: TaskDataset, config: TrainConfig) -> list[list[float]]:
    """Retrain every earlier head on frozen features, newer data counted as ood.

    Each batch contributes its summed negative log-likelihood divided by
    twice the memory size, so an epoch accumulates the whole objective once.
    Returns the per-task batch losses.
    """
    k = data.task_id
    if config.back_epochs == 0 or memory.budget == 0:
        return []
    norm = 1.0 / (2 * memory.budget)
    history = []
    for j in range(k):
        rng = np.random.default_rng([config.seed, 0xBAC, k, j])
        ind_x, ind_y, ood_x = build_back_dataset(data, memory, j, rng)
        lookup = {c: i for i, c in enumerate(model.task_classes[j])}
        X = np.concatenate([ind_x, ood_x])
        y = np.concatenate([np.array([lookup[int(c)] for c in ind_y], dtype=np.int64),
                            np.full(len(ood_x), model.ood_index(j), dtype=np.int64)])
        if len(X) == 0:
            history.append([])
            continue
        Z = task_features(model, X, j)
        W, b = model.heads[j]
        opt = gc.SGD([W, b], config.back_lr, config.momentum)
        losses = []
        for _ in range(config.back_epochs):
            perm = rng.permutation(len(X))
            for start in range(0, len(X), config.back_batch):
                idx = perm[start:start + config.back_batch]
                opt.zero_grad()
                with gc.Tape() as tape:
                    loss = gc.scale(gc.cross_entropy(model.head(gc.Tensor(Z[idx]), j), y[idx], "sum"), norm)
                tape.backward(loss)
                opt.step()
                losses.append(float(loss.data))
        history.append(losses)
    return history


def learn_task(model: AdapterModel, data: TaskDataset, memory: ReplayMemory,
               config: TrainConfig) -> TaskLog:
    """Train one task, then (from the second task on) revisit earlier heads."""
    record = train_task(model, data, memory, config)
    if config.back_update and data.task_id > 0:
        back_update(model, memory, data, config)
    return record


def split_by_task(X, y, task_classes: Sequence[Sequence[int]]) -> list[TaskDataset]:
    out = []
    for k, classes in enumerate(task_classes):
        sel = np.isin(y, classes)
        out.append(TaskDataset(X[sel], y[sel], k, [int(c) for c in classes]))
    return out
