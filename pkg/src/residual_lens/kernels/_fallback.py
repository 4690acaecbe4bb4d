"""Pure NumPy versions of the hot kernels.

Used when the compiled extension is unavailable or when
``RESIDUAL_LENS_PURE_PYTHON=1`` is set. Results match the native module
bit-for-bit on the selection logic and to rounding on distances.
"""

from __future__ import annotations

import numpy as np

_BLOCK = 512


def two_nearest(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances from every row to its first and second nearest other row."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    sq = np.einsum("ij,ij->i", x, x)
    r1 = np.empty(n)
    r2 = np.empty(n)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        block = x[start:stop]
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * block @ x.T
        # exact differences for the two candidates, the expansion above loses precision
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        idx = np.argpartition(d2, 1, axis=1)[:, :2]
        diff = block[:, None, :] - x[idx]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        d.sort(axis=1)
        r1[start:stop] = d[:, 0]
        r2[start:stop] = d[:, 1]
    return r1, r2


def greedy_match(score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy assignment without replacement on a nonnegative score matrix.

    At each step picks the largest remaining entry; ties go to the lowest
    row, then lowest column. Returns ``min(k1, k2)`` row and column indices.
    """
    s = np.array(score, dtype=np.float64, copy=True)
    k1, k2 = s.shape
    rows = np.empty(min(k1, k2), dtype=np.int64)
    cols = np.empty(min(k1, k2), dtype=np.int64)
    for n in range(min(k1, k2)):
        flat = int(np.argmax(s))
        i, j = divmod(flat, k2)
        rows[n] = i
        cols[n] = j
        s[i, :] = -np.inf
        s[:, j] = -np.inf
    return rows, cols
