"""Model checkpoints: model, replay memory and task statistics in one file.

Layout, all little-endian::

    b"MORECKPT"  version:u16
    d:u32  n_layers:u32  hidden_dims:u32*n_layers  seed:u64
    n_tasks:u32  |Y^k|:u32*n_tasks  class ids:u32 per task
    shared weights and biases, task embeddings, heads (W, b),
    accumulated masks, standardization mean, standardization std   (f64)
    budget:u32  dim:u32  seed:u64  n_entries:u32  n_entries x (label:u32, task:u32, dim x f64)
    n_stats:u32  per task: task:u32 n:u32 m:u32 class ids:u32*n  means, cov, cov_inv (f64)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

from .distance import TaskStats
from .hatnet import AdapterModel
from .memory import ReplayMemory

MAGIC = b"MORECKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: AdapterModel, memory: ReplayMemory, stats: list[TaskStats]) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<H", VERSION))
    model.write(f)
    memory.write(f)
    f.write(struct.pack("<I", len(stats)))
    for st in stats:
        st.write(f)
    return f.getvalue()


def loads(raw: bytes) -> tuple[AdapterModel, ReplayMemory, list[TaskStats]]:
    if raw[:8] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}")
    (version,) = struct.unpack_from("<H", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    f = io.BytesIO(raw)
    f.seek(10)
    try:
        model = AdapterModel.read(f)
        memory = ReplayMemory.read(f)
        (n,) = struct.unpack("<I", f.read(4))
        stats = [TaskStats.read(f) for _ in range(n)]
    except (EOFError, struct.error) as exc:
        raise CheckpointError(str(exc)) from exc
    if f.read(1):
        raise CheckpointError(f"trailing bytes after offset {f.tell() - 1}")
    return model, memory, stats


def save(path, model, memory, stats):
    Path(path).write_bytes(dumps(model, memory, stats))


def load(path):
    return loads(Path(path).read_bytes())
