"""Compiled inner loops."""

import numba
import numpy as np


@numba.njit(cache=True)
def neighbor_max(x, idx):
    """Per-channel max over neighbor rows -> (max values, source row per entry)."""
    n, k = idx.shape
    c = x.shape[1]
    best = np.empty((n, c))
    src = np.empty((n, c), np.int64)
    for i in range(n):
        r0 = idx[i, 0]
        for ch in range(c):
            best[i, ch] = x[r0, ch]
            src[i, ch] = r0
        for j in range(1, k):
            r = idx[i, j]
            for ch in range(c):
                v = x[r, ch]
                if v > best[i, ch]:
                    best[i, ch] = v
                    src[i, ch] = r
    return best, src

