"""Fixed-budget, class-balanced replay memory.

Stored samples are never replayed as targets of their own classes while a
new task trains; they are the out-of-distribution examples for its head.
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class MemoryBudgetError(ValueError):
    pass


class ReplayMemory:
    def __init__(self, budget: int, dim: int, seed: int = 0):
        if budget < 0:
            raise ValueError("budget must be nonnegative")
        self.budget = int(budget)
        self.dim = int(dim)
        self.seed = int(seed)
        self.features = np.zeros((0, self.dim))
        self.labels = np.zeros(0, dtype=np.int64)
        self.tasks = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def class_counts(self) -> dict[int, int]:
        classes, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(classes, counts)}

    def quotas(self, classes) -> dict[int, int]:
        """Per-class slot counts; the remainder goes to the lowest class ids."""
        classes = sorted(int(c) for c in classes)
        n = len(classes)
        q, r = divmod(self.budget, n)
        if q == 0:
            raise MemoryBudgetError(f"budget {self.budget} cannot hold one sample for each of {n} classes")
        return {c: q + (1 if i < r else 0) for i, c in enumerate(classes)}

    def update(self, X: np.ndarray, y: np.ndarray, task_id: int) -> "ReplayMemory":
        """Shrink stored classes to their new quota and admit the classes of ``task_id``."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise ValueError("task data is empty")
        if self.budget == 0:
            return self
        new_classes = np.unique(y)
        seen = set(self.class_counts())
        if seen.intersection(new_classes.tolist()):
            raise ValueError(f"classes {sorted(seen.intersection(new_classes.tolist()))} already in memory")
        quota = self.quotas(seen.union(new_classes.tolist()))
        rng = np.random.default_rng([self.seed, 0x3E3, task_id])

        keep = []
        for c in sorted(seen):
            idx = np.flatnonzero(self.labels == c)
            if len(idx) > quota[c]:
                idx = np.sort(rng.choice(idx, size=quota[c], replace=False))
            keep.append(idx)
        keep = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
        feats, labels, tasks = [self.features[keep]], [self.labels[keep]], [self.tasks[keep]]
        for c in new_classes:
            idx = np.flatnonzero(y == c)
            take = min(quota[int(c)], len(idx))
            idx = np.sort(rng.choice(idx, size=take, replace=False))
            feats.append(X[idx])
            labels.append(y[idx])
            tasks.append(np.full(take, task_id, dtype=np.int64))
        self.features = np.concatenate(feats, axis=0)
        self.labels = np.concatenate(labels)
        self.tasks = np.concatenate(tasks)
        return self

    def of_task(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.tasks == j)

    def not_of_task(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.tasks != j)

    def write(self, f: BinaryIO):
        f.write(struct.pack("<IIQI", self.budget, self.dim, self.seed, len(self)))
        for x, c, t in zip(self.features, self.labels, self.tasks):
            f.write(struct.pack("<II", int(c), int(t)))
            f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())

    @classmethod
    def read(cls, f: BinaryIO) -> "ReplayMemory":
        head = f.read(20)
        if len(head) != 20:
            raise EOFError(f"truncated memory section at byte {f.tell()}")
        budget, dim, seed, n = struct.unpack("<IIQI", head)
        mem = cls(budget, dim, seed)
        rec = 8 + 8 * dim
        raw = f.read(rec * n)
        if len(raw) != rec * n:
            raise EOFError(f"truncated memory entries at byte {f.tell()}")
        rows = np.frombuffer(raw, dtype=np.dtype([("c", "<u4"), ("t", "<u4"), ("x", "<f8", (dim,))]), count=n)
        mem.labels = rows["c"].astype(np.int64)
        mem.tasks = rows["t"].astype(np.int64)
        mem.features = rows["x"].astype(np.float64).reshape(n, dim)
        return mem


def update_memory(memory: ReplayMemory, X, y, task_id: int) -> ReplayMemory:
    return memory.update(X, y, task_id)


def sample_ood_batch(memory: ReplayMemory, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of up to ``batch_size`` distinct stored feature vectors."""
    n = min(batch_size, len(memory))
    if n == 0:
        return np.zeros((0, memory.dim))
    return memory.features[np.sort(rng.choice(len(memory), size=n, replace=False))]


class OODSampler:
    """Successive batches from shuffled passes over the memory.

    Within one pass every entry is returned exactly once. A batch that
    straddles two passes never repeats an entry.
    """

    def __init__(self, memory: ReplayMemory, rng: np.random.Generator):
        self.memory = memory
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def _refill(self, exclude=()):
        order = self.rng.permutation(len(self.memory))
        if len(exclude):
            # entries already in the current batch move to the back of the new pass
            held = np.isin(order, exclude)
            order = np.concatenate([order[~held], order[held]])
        self._order, self._pos = order, 0

    def next_indices(self, batch_size: int) -> np.ndarray:
        n = len(self.memory)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        batch_size = min(batch_size, n)
        if self._pos >= len(self._order):
            self._refill()
        out = self._order[self._pos:self._pos + batch_size]
        self._pos += len(out)
        if len(out) < batch_size:
            self._refill(exclude=out)
            extra = self._order[:batch_size - len(out)]
            self._pos = len(extra)
            out = np.concatenate([out, extra])
        return out

    def next(self, batch_size: int) -> np.ndarray:
        return self.memory.features[self.next_indices(batch_size)]
