"""Multi-head adapter network with hard-attention masks.

Input features are standardized with statistics frozen after the first task,
then pass through fully connected ReLU layers whose outputs are gated by a
per-task sigmoid mask. Each task owns a linear head with one extra output
reserved for "out of distribution".
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import DimensionError, GradHook, Tensor


class UnknownTaskError(KeyError):
    pass


class CapacityExhaustedWarning(RuntimeWarning):
    pass


@dataclass
class MaskConfig:
    s_max: float = 500.0
    lam: float = 0.75
    anneal: bool = True
    clamp: float = 6.0
    # cosh argument cap for embedding-gradient compensation
    thres_cosh: float = 50.0

    def __post_init__(self):
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")


def compute_mask(e, s: float) -> Tensor:
    """Sigmoid gate ``1 / (1 + exp(-s * e))``; differentiable in ``e``."""
    if s <= 0:
        raise ValueError("s must be positive")
    return gc.sigmoid(gc.scale(e, s))


def apply_mask(h, a) -> Tensor:
    """Gate activations ``h`` (vector or row batch) by mask ``a``."""
    h, a = gc.as_tensor(h), gc.as_tensor(a)
    if h.data.ndim == 1:
        if h.shape != a.shape:
            raise DimensionError(f"mask length {a.shape} != activation length {h.shape}")
        return gc.mul(h, a)
    if a.data.ndim != 1 or h.shape[-1] != a.shape[0]:
        raise DimensionError(f"mask length {a.shape} != activation width {h.shape}")
    return gc.row_mul(h, a)


def accumulate_mask(a_prev_cum, a_task) -> np.ndarray:
    a_prev_cum = np.asarray(a_prev_cum, dtype=np.float64)
    a_task = np.asarray(a_task, dtype=np.float64)
    if a_prev_cum.shape != a_task.shape:
        raise DimensionError(f"{a_prev_cum.shape} vs {a_task.shape}")
    return np.maximum(a_prev_cum, a_task)


def gradient_multiplier(a_cum_l, a_cum_prev) -> np.ndarray:
    """Entry (i, j) is ``1 - min(a_cum_l[i], a_cum_prev[j])``."""
    a_cum_l = np.asarray(a_cum_l, dtype=np.float64)
    a_cum_prev = np.asarray(a_cum_prev, dtype=np.float64)
    return 1.0 - np.minimum.outer(a_cum_l, a_cum_prev)


def mask_regularizer(a_task: Sequence, a_cum: Sequence, lam: float) -> Tensor:
    """Sparsity penalty on the neurons still free after earlier tasks."""
    if len(a_task) != len(a_cum):
        raise DimensionError("mask and accumulated-mask layer counts differ")
    free = [1.0 - np.asarray(c, dtype=np.float64) for c in a_cum]
    denom = float(sum(f.sum() for f in free))
    if denom == 0.0:
        warnings.warn("all neurons already used by earlier tasks", CapacityExhaustedWarning)
        return Tensor(0.0)
    num = None
    for a, f in zip(a_task, free):
        term = gc.sum_all(gc.mul(a, Tensor(f)))
        num = term if num is None else gc.add(num, term)
    return gc.scale(num, lam / denom)


def anneal_s(b: int, B: int, s_max: float) -> float:
    """Linear schedule from ``1/s_max`` at batch 1 to ``s_max`` at batch B."""
    if not 1 <= b <= B:
        raise ValueError(f"batch index {b} outside 1..{B}")
    if B == 1:
        return float(s_max)
    return 1.0 / s_max + (s_max - 1.0 / s_max) * (b - 1) / (B - 1)


class AdapterModel:
    """Shared masked adapter (``weights``, ``biases``), per-task embeddings and heads.

    Task ids are 0-based and assigned in order by :meth:`add_task`.
    ``cum_masks[l]`` is the elementwise max of the masks of every task whose
    training has finished.
    """

    s_default = 500.0

    def __init__(self, input_dim: int, hidden_dims: Sequence[int] = (64, 64), seed: int = 0):
        if input_dim < 1 or not hidden_dims or min(hidden_dims) < 1:
            raise ValueError("dimensions must be positive")
        self.input_dim = int(input_dim)
        self.hidden_dims = [int(h) for h in hidden_dims]
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0xADA])
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        fan_in = self.input_dim
        for l, width in enumerate(self.hidden_dims):
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, fan_in))
            self.weights.append(Tensor(W, requires_grad=True, name=f"W{l}"))
            self.biases.append(Tensor(np.zeros(width), requires_grad=True, name=f"b{l}"))
            fan_in = width
        self.embeddings: list[list[Tensor]] = []
        self.heads: list[tuple[Tensor, Tensor]] = []
        self.task_classes: list[list[int]] = []
        self.cum_masks = [np.zeros(w) for w in self.hidden_dims]
        self.feat_mean = np.zeros(self.input_dim)
        self.feat_std = np.ones(self.input_dim)

    # -- structure

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def add_task(self, classes: Sequence[int]) -> int:
        k = self.n_tasks
        rng = np.random.default_rng([self.seed, 0xE1, k])
        emb = [Tensor(rng.normal(0.0, 1.0, size=w), requires_grad=True, name=f"e{k}.{l}")
               for l, w in enumerate(self.hidden_dims)]
        n_out = len(classes) + 1
        Wh = rng.normal(0.0, np.sqrt(1.0 / self.feature_dim), size=(n_out, self.feature_dim))
        head = (Tensor(Wh, requires_grad=True, name=f"phi{k}.W"),
                Tensor(np.zeros(n_out), requires_grad=True, name=f"phi{k}.b"))
        self.embeddings.append(emb)
        self.heads.append(head)
        self.task_classes.append([int(c) for c in classes])
        return k

    def _check_task(self, k: int):
        if not 0 <= k < self.n_tasks:
            raise UnknownTaskError(f"task {k} not in model with {self.n_tasks} tasks")

    def ood_index(self, k: int) -> int:
        self._check_task(k)
        return len(self.task_classes[k])

    def shared_parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def task_parameters(self, k: int) -> list[Tensor]:
        self._check_task(k)
        return self.shared_parameters() + list(self.embeddings[k]) + list(self.heads[k])

    # -- standardization (frozen replacement for trainable norm layers)

    def set_standardization(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        self.feat_mean = X.mean(axis=0)
        self.feat_std = np.where(std > 0, std, 1.0)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise DimensionError(f"expected {self.input_dim}-dim input, got {X.shape[1]}")
        return (X - self.feat_mean) / self.feat_std

    # -- forward

    def masks(self, k: int, s: float) -> list[Tensor]:
        self._check_task(k)
        return [compute_mask(e, s) for e in self.embeddings[k]]

    def features(self, X, k: int, s: float, masks: Sequence[Tensor] | None = None) -> Tensor:
        """Last gated hidden layer for task ``k`` on a batch of raw features."""
        if masks is None:
            masks = self.masks(k, s)
        h = Tensor(self.standardize(X))
        for W, b, a in zip(self.weights, self.biases, masks):
            h = apply_mask(gc.relu(gc.linear(h, W, b)), a)
        return h

    def head(self, z, k: int) -> Tensor:
        self._check_task(k)
        W, b = self.heads[k]
        return gc.linear(z, W, b)

    def forward(self, X, k: int, s: float | None = None, masks=None) -> Tensor:
        """Logits of head ``k``: ``len(task_classes[k]) + 1`` columns, ood last."""
        self._check_task(k)
        s = self.s_default if s is None else s
        return self.head(self.features(X, k, s, masks), k)

    # -- protection

    def grad_hooks(self) -> list[GradHook]:
        """Multipliers that freeze weights feeding neurons used by finished tasks.

        The input layer has no mask, so its upstream side counts as all ones.
        Heads are never hooked.
        """
        hooks = []
        upstream = np.ones(self.input_dim)
        for W, b, cum in zip(self.weights, self.biases, self.cum_masks):
            hooks.append(GradHook(W, gradient_multiplier(cum, upstream)))
            hooks.append(GradHook(b, 1.0 - cum))
            upstream = cum
        return hooks

    def task_mask_values(self, k: int, s: float | None = None) -> list[np.ndarray]:
        s = self.s_default if s is None else s
        self._check_task(k)
        return [gc.stable_sigmoid(s * e.data) for e in self.embeddings[k]]

    def accumulate(self, k: int, s: float | None = None):
        self.cum_masks = [accumulate_mask(c, a)
                          for c, a in zip(self.cum_masks, self.task_mask_values(k, s))]

    def binarized_cum_masks(self, threshold: float = 0.5) -> list[np.ndarray]:
        return [(c >= threshold).astype(np.float64) for c in self.cum_masks]

    def parameter_count(self) -> dict[str, int]:
        shared = sum(t.data.size for t in self.shared_parameters())
        emb = sum(e.data.size for task in self.embeddings for e in task)
        heads = sum(t.data.size for pair in self.heads for t in pair)
        return {"shared": shared, "embeddings": emb, "heads": heads, "total": shared + emb + heads}

    # -- serialization (little-endian; layout documented in morecl.checkpoint)

    def write(self, f: BinaryIO):
        f.write(struct.pack("<II", self.input_dim, len(self.hidden_dims)))
        f.write(struct.pack(f"<{len(self.hidden_dims)}I", *self.hidden_dims))
        f.write(struct.pack("<Q", self.seed))
        f.write(struct.pack("<I", self.n_tasks))
        for classes in self.task_classes:
            f.write(struct.pack("<I", len(classes)))
        for classes in self.task_classes:
            f.write(struct.pack(f"<{len(classes)}I", *classes))
        for t in self.shared_parameters():
            _write_f64(f, t.data)
        for task in self.embeddings:
            for e in task:
                _write_f64(f, e.data)
        for W, b in self.heads:
            _write_f64(f, W.data)
            _write_f64(f, b.data)
        for c in self.cum_masks:
            _write_f64(f, c)
        _write_f64(f, self.feat_mean)
        _write_f64(f, self.feat_std)

    @classmethod
    def read(cls, f: BinaryIO) -> "AdapterModel":
        d, n_layers = _unpack(f, "<II")
        hidden = list(_unpack(f, f"<{n_layers}I"))
        (seed,) = _unpack(f, "<Q")
        (n_tasks,) = _unpack(f, "<I")
        sizes = [_unpack(f, "<I")[0] for _ in range(n_tasks)]
        model = cls(d, hidden, seed)
        classes = [list(_unpack(f, f"<{n}I")) if n else [] for n in sizes]
        for t in model.shared_parameters():
            t.data = _read_f64(f, t.shape)
        for k in range(n_tasks):
            model.add_task(classes[k])
        for task in model.embeddings:
            for e in task:
                e.data = _read_f64(f, e.shape)
        for W, b in model.heads:
            W.data = _read_f64(f, W.shape)
            b.data = _read_f64(f, b.shape)
        model.cum_masks = [_read_f64(f, (w,)) for w in hidden]
        model.feat_mean = _read_f64(f, (d,))
        model.feat_std = _read_f64(f, (d,))
        return model


class RandomProjection:
    """Fixed seeded linear map standing in for a frozen feature extractor."""

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        rng = np.random.default_rng([seed, 0x9A0])
        self.matrix = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.matrix


def _write_f64(f: BinaryIO, a: np.ndarray):
    f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_f64(f: BinaryIO, shape) -> np.ndarray:
    n = int(np.prod(shape)) if len(shape) else 1
    buf = f.read(8 * n)
    if len(buf) != 8 * n:
        raise EOFError(f"truncated checkpoint at byte {f.tell()}")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


def _unpack(f: BinaryIO, fmt: str) -> tuple:
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise EOFError(f"truncated checkpoint at byte {f.tell()}")
    return struct.unpack(fmt, buf)
