"""Hot inner loops, compiled with numba when available.

Set ``REMOH_LAB_NO_NUMBA=1`` to force the pure-numpy path.  Both paths are
always importable as ``numpy_*`` / ``numba_*`` so tests and the benchmark can
compare them directly; the unprefixed names are the selected backend.
"""
import os

import numpy as np

_DISABLE = os.environ.get("REMOH_LAB_NO_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("numba disabled by REMOH_LAB_NO_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path

def numpy_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def numpy_softmax_rows_grad(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def numpy_cross_entropy(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    nll = np.log(s[:, 0]) - z[rows, targets]
    return nll.mean(), probs


def numpy_cross_entropy_grad(probs, targets):
    g = probs.copy()
    g[np.arange(probs.shape[0]), targets] -= 1.0
    return g / probs.shape[0]


def numpy_active_counts(scores, row_mask):
    """Per column: number of masked-in rows with a strictly positive entry."""
    return ((scores > 0.0) & row_mask[:, None]).sum(axis=0).astype(np.int64)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def numba_softmax_rows(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                v = np.exp(x[i, j] - mx)
                out[i, j] = v
                s += v
            inv = 1.0 / s
            for j in range(d):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def numba_softmax_rows_grad(y, g):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def numba_cross_entropy(logits, targets):
        n, v = logits.shape
        probs = np.empty_like(logits)
        total = 0.0
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(v):
                e = np.exp(logits[i, j] - mx)
                probs[i, j] = e
                s += e
            for j in range(v):
                probs[i, j] /= s
            total += np.log(s) - (logits[i, targets[i]] - mx)
        return total / n, probs

    @njit(cache=True)
    def numba_cross_entropy_grad(probs, targets):
        n = probs.shape[0]
        g = probs.copy()
        for i in range(n):
            g[i, targets[i]] -= 1.0
        return g / n

    @njit(cache=True)
    def numba_active_counts(scores, row_mask):
        n, m = scores.shape
        out = np.zeros(m, dtype=np.int64)
        for i in range(n):
            if row_mask[i]:
                for j in range(m):
                    if scores[i, j] > 0.0:
                        out[j] += 1
        return out

    softmax_rows = numba_softmax_rows
    softmax_rows_grad = numba_softmax_rows_grad
    cross_entropy = numba_cross_entropy
    cross_entropy_grad = numba_cross_entropy_grad
    active_counts = numba_active_counts
else:
    softmax_rows = numpy_softmax_rows
    softmax_rows_grad = numpy_softmax_rows_grad
    cross_entropy = numpy_cross_entropy
    cross_entropy_grad = numpy_cross_entropy_grad
    active_counts = numpy_active_counts

BACKEND = "numba" if HAVE_NUMBA else "numpy"
