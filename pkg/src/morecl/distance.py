"""Per-task Gaussian statistics and the inverse-Mahalanobis coefficient."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np
from scipy import linalg


class EmptyClassError(ValueError):
    pass


@dataclass
class CoefficientConfig:
    c: float = 20.0
    md_floor: float = 1e-12
    squared: bool = False

    def __post_init__(self):
        if self.c <= 0 or self.md_floor <= 0:
            raise ValueError("c and md_floor must be positive")


@dataclass
class TaskStats:
    task: int
    classes: list[int]
    means: np.ndarray        # (n_classes, m)
    cov: np.ndarray          # (m, m), average of per-class biased covariances
    cov_inv: np.ndarray      # inverse of the ridge-regularized cov

    def write(self, f: BinaryIO):
        n, m = self.means.shape
        f.write(struct.pack("<III", self.task, n, m))
        f.write(struct.pack(f"<{n}I", *self.classes))
        for a in (self.means, self.cov, self.cov_inv):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def read(cls, f: BinaryIO) -> "TaskStats":
        raw = f.read(12)
        if len(raw) != 12:
            raise EOFError(f"truncated stats header at byte {f.tell()}")
        task, n, m = struct.unpack("<III", raw)
        classes = list(struct.unpack(f"<{n}I", f.read(4 * n)))
        arrays = []
        for shape in ((n, m), (m, m), (m, m)):
            size = 8 * shape[0] * shape[1]
            buf = f.read(size)
            if len(buf) != size:
                raise EOFError(f"truncated stats payload at byte {f.tell()}")
            arrays.append(np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape))
        return cls(task, classes, *arrays)


def class_mean(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise EmptyClassError("class mean of an empty sample set")
    return Z.mean(axis=0)


def class_covariance(Z) -> np.ndarray:
    """Biased (divide by n) covariance of one class."""
    Z = np.asarray(Z, dtype=np.float64)
    D = Z - class_mean(Z)
    return D.T @ D / len(Z)


def task_covariance(per_class: Sequence) -> np.ndarray:
    covs = [class_covariance(Z) for Z in per_class]
    return sum(covs) / len(covs)


def regularized_inverse(S: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    d = S.shape[0]
    ridge = eps * np.trace(S) / d
    if ridge <= 0:
        ridge = eps
    R = S + ridge * np.eye(d)
    L = linalg.cho_factor(R, lower=True)
    return linalg.cho_solve(L, np.eye(d))


def compute_stats(task: int, Z: np.ndarray, y: np.ndarray, classes: Sequence[int]) -> TaskStats:
    """Statistics from task-``task`` features ``Z`` of its own training samples."""
    groups = []
    for c in classes:
        Zc = Z[y == c]
        if len(Zc) == 0:
            raise EmptyClassError(f"class {c} has no training features")
        groups.append(Zc)
    S = task_covariance(groups)
    return TaskStats(task, [int(c) for c in classes],
                     np.stack([class_mean(g) for g in groups]), S, regularized_inverse(S))


def mahalanobis(z, mu, S_inv) -> np.ndarray | float:
    """``sqrt((z - mu)^T S_inv (z - mu))`` for one vector or a batch of rows."""
    z = np.asarray(z, dtype=np.float64)
    D = z - np.asarray(mu, dtype=np.float64)
    q = np.einsum("...i,ij,...j->...", D, S_inv, D)
    if np.any(q < 0):
        warnings.warn("negative Mahalanobis quadratic form clamped to 0", RuntimeWarning)
        q = np.maximum(q, 0.0)
    out = np.sqrt(q)
    return float(out) if out.ndim == 0 else out


def coefficient(Z, stats: TaskStats, config: CoefficientConfig | None = None) -> np.ndarray | float:
    """Largest ``c / MD`` over the task's classes (``MD^2`` when ``config.squared``)."""
    config = config or CoefficientConfig()
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    md = np.stack([np.atleast_1d(mahalanobis(Z, mu, stats.cov_inv)) for mu in stats.means], axis=1)
    if config.squared:
        md = md * md
    out = (config.c / np.maximum(md, config.md_floor)).max(axis=1)
    return float(out[0]) if single else out
