"""Small reverse-mode autodiff on float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in reverse, accumulates gradients into every
tracked tensor and then applies any :class:`GradHook` multipliers.

    >>> with Tape() as tape:
    ...     x = Tensor([3.0], requires_grad=True)
    ...     y = sum_all(mul(x, x))
    >>> tape.backward(y)[x]
    array([6.])
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


_ACTIVE = contextvars.ContextVar("morecl_active_tape", default=None)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class GradHook:
    """Elementwise multiplier applied to ``target.grad`` after accumulation."""

    target: Tensor
    multiplier: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.multiplier, dtype=np.float64)
        if m.shape != self.target.shape:
            raise DimensionError(f"hook multiplier shape {m.shape} != target shape {self.target.shape}")
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ValueError("hook multipliers must lie in [0, 1]")
        object.__setattr__(self, "multiplier", m)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]
    op: str


class Tape:
    """Ordered record of executed operations for one training context."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp, op: str):
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp, op))

    def backward(self, loss: Tensor, hooks: Iterable[GradHook] = ()) -> dict[Tensor, np.ndarray]:
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tracked: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tracked[key] = inp
        result = {}
        for key, t in tracked.items():
            t.grad = grads[key]
            result[t] = t.grad
        for hook in hooks:
            if hook.target.grad is not None:
                hook.target.grad = hook.target.grad * hook.multiplier
                result[hook.target] = hook.target.grad
        return result


def backward(tape: Tape, loss: Tensor, hooks: Iterable[GradHook] = ()) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, hooks)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp, op)
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- forward ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` with ``weight`` stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return add_bias(out, bias) if bias is not None else out


def add_bias(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def row_mul(x, v) -> Tensor:
    """Multiply every row of matrix ``x`` by vector ``v`` elementwise."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"row_mul: {x.shape} * {v.shape}")
    X, V = x.data, v.data
    return _emit(X * V, (x, v), lambda g: (g * V, (g * X).sum(axis=0)), "row_mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = stable_sigmoid(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _emit(np.log(A), (a,), lambda g: (g / A,), "log")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "maximum")
    pick_a = a.data >= b.data
    return _emit(np.maximum(a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a), "maximum")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _emit(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis of a matrix (or a vector)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), vjp, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(y, (a,), vjp, "log_softmax")


def pick(a, index: Sequence[int]) -> Tensor:
    """``a[i, index[i]]`` for each row i of a matrix."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: {a.shape} with {idx.shape} indices")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _emit(a.data[rows, idx], (a,), vjp, "pick")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    if len({p.shape[1:] for p in parts}) != 1:
        raise DimensionError("concat_rows: trailing shapes differ")
    cuts = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=0)), "concat_rows")


def cross_entropy(logits, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """Categorical cross-entropy of row logits against integer labels."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C}); got range [{labels.min()}, {labels.max()}]")
    nll = scale(pick(log_softmax(logits), labels), -1.0)
    if reduction == "sum":
        return sum_all(nll)
    if reduction == "mean":
        return mean(nll)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, velocity: list | None = None) -> list[np.ndarray]:
    """In-place momentum SGD: ``v <- momentum*v + g; p <- p - lr*v``.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the whole step undone.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in params]
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {p!r}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        velocity[i] = momentum * velocity[i] + g
        p.data = p.data - lr * velocity[i]
    return velocity


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.lr, self.momentum, self.velocity)
