"""Synthetic Gaussian benchmarks, the binary feature-file format and class orders.

Feature file layout (little-endian)::

    b"MOREFEAT"  version:u16  n_samples:u32  dim:u32  n_classes:u32
    n_samples x (label:u32, dim x f64)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEAT_MAGIC = b"MOREFEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<8sHIII")


class FeatureFileError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    dim: int = 16
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 10.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.separation < 0 or self.scale <= 0:
            raise ValueError("separation must be >= 0 and scale > 0")


@dataclass
class FeatureSet:
    X: np.ndarray
    y: np.ndarray
    n_classes: int


def class_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xC3])
    u = rng.normal(size=(spec.n_classes, spec.dim))
    return spec.separation * u / np.linalg.norm(u, axis=1, keepdims=True)


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureSet, FeatureSet]:
    """Isotropic Gaussian clusters around random unit directions scaled by ``separation``."""
    centers = class_centers(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    splits = []
    for per_class in (spec.train_per_class, spec.test_per_class):
        X = np.concatenate([c + spec.scale * rng.normal(size=(per_class, spec.dim)) for c in centers])
        y = np.repeat(np.arange(spec.n_classes), per_class)
        splits.append(FeatureSet(X, y, spec.n_classes))
    return splits[0], splits[1]


def write_features(path, fs: FeatureSet):
    X = np.asarray(fs.X, dtype=np.float64)
    y = np.asarray(fs.y, dtype=np.int64)
    n, d = X.shape
    rows = np.empty(n, dtype=np.dtype([("c", "<u4"), ("x", "<f8", (d,))]))
    rows["c"] = y
    rows["x"] = X
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, n, d, fs.n_classes))
        f.write(rows.tobytes())


def load_features(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"header needs {_HEADER.size} bytes, file has {len(raw)}", len(raw))
    magic, version, n, d, n_classes = _HEADER.unpack_from(raw, 0)
    if magic != FEAT_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}", 0)
    if version != FEAT_VERSION:
        raise FeatureFileError(f"unsupported version {version}", 8)
    rec = 4 + 8 * d
    want = _HEADER.size + rec * n
    if len(raw) < want:
        complete = (len(raw) - _HEADER.size) // rec
        raise FeatureFileError(f"truncated payload: record {complete} of {n} incomplete",
                               _HEADER.size + complete * rec)
    rows = np.frombuffer(raw, dtype=np.dtype([("c", "<u4"), ("x", "<f8", (d,))]), count=n, offset=_HEADER.size)
    y = rows["c"].astype(np.int64)
    bad = np.flatnonzero(y >= n_classes)
    if len(bad):
        i = int(bad[0])
        raise FeatureFileError(f"label {y[i]} out of range for {n_classes} classes in record {i}",
                               _HEADER.size + i * rec)
    return FeatureSet(rows["x"].astype(np.float64).reshape(n, d), y, int(n_classes))


def make_class_order(n_classes: int, seed: int) -> list[int]:
    """Seeded Fisher-Yates shuffle of ``range(n_classes)``."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    rng = np.random.default_rng([seed, 0x0D])
    order = list(range(n_classes))
    for i in range(n_classes - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order
