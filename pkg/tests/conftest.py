import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from morecl.data import SyntheticSpec, generate_synthetic  # noqa: E402
from morecl.trainer import split_by_task  # noqa: E402


def synthetic_tasks(n_tasks=2, per_task=2, separation=10.0, dim=8, seed=0, train=60, test=30):
    spec = SyntheticSpec(n_tasks * per_task, dim, train, test, separation, 1.0, seed)
    tr, te = generate_synthetic(spec)
    classes = [list(range(k * per_task, (k + 1) * per_task)) for k in range(n_tasks)]
    return split_by_task(tr.X, tr.y, classes), split_by_task(te.X, te.y, classes)


def checksum(tensors) -> bytes:
    return b"".join(np.ascontiguousarray(t.data).tobytes() for t in tensors)
