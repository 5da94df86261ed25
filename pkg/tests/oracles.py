"""Independent reference computations used to freeze expected values.

Nothing here imports the code under test's arithmetic paths.
"""
import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so loses less to cancellation on tiny gradients.
    """
    stencil = {2: [(1, 0.5), (-1, -0.5)],
               4: [(2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)]}[order]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        acc = 0.0
        for step, w in stencil:
            x[i] = old + step * h
            acc += w * f()
        x[i] = old
        g[i] = acc / h
    return g


def relative_error(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def triple_loop_matmul(A, B):
    n, k = len(A), len(A[0])
    m = len(B[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            out[i][j] = sum(A[i][t] * B[t][j] for t in range(k))
    return np.array(out)


def gauss_jordan_inverse(M) -> np.ndarray:
    n = len(M)
    A = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)] for i, row in enumerate(M)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(A[r][col]))
        A[col], A[piv] = A[piv], A[col]
        p = A[col][col]
        A[col] = [v / p for v in A[col]]
        for r in range(n):
            if r != col and A[r][col] != 0.0:
                f = A[r][col]
                A[r] = [vr - f * vc for vr, vc in zip(A[r], A[col])]
    return np.array([row[n:] for row in A])


def mahalanobis_explicit(z, mu, S_inv) -> float:
    d = [zi - mi for zi, mi in zip(z, mu)]
    n = len(d)
    q = sum(d[i] * S_inv[i][j] * d[j] for i in range(n) for j in range(n))
    return math.sqrt(max(q, 0.0))


def pair_count_auc(ind, ood) -> float:
    wins = ties = 0
    for a in ind:
        for b in ood:
            if a > b:
                wins += 1
            elif a == b:
                ties += 1
    return (wins + 0.5 * ties) / (len(ind) * len(ood))


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def log_softmax_rows(Z: np.ndarray) -> np.ndarray:
    out = np.empty_like(Z)
    for i, row in enumerate(Z):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        out[i] = [v - lse for v in row]
    return out


def straight_line_logits(x, mean, std, layers, masks, head_W, head_b) -> np.ndarray:
    """Per-sample forward pass written with Python loops."""
    h = [(xi - m) / s for xi, m, s in zip(x, mean, std)]
    for (W, b), a in zip(layers, masks):
        nxt = []
        for i in range(len(b)):
            pre = b[i] + sum(W[i][j] * h[j] for j in range(len(h)))
            nxt.append(a[i] * (pre if pre > 0 else 0.0))
        h = nxt
    return np.array([head_b[o] + sum(head_W[o][j] * h[j] for j in range(len(h)))
                     for o in range(len(head_b))])
