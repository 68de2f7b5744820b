"""Compiled inner loops for the 2D autoregressive recurrence."""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def fill_planes(planes, weights):
    """Fill ``planes`` (N, H, W) in place with the raster-order recurrence.

    ``weights`` is (N, V, V): the window weights with the bottom-right cell
    ignored.  Cells with row < V-1 or col < V-1 are left untouched (init band).
    The accumulation order is fixed (raster) so results are bit-reproducible.
    """
    n, h, w = planes.shape
    v = weights.shape[1]
    for p in range(n):
        x = planes[p]
        k = weights[p]
        for i in range(v - 1, h):
            for j in range(v - 1, w):
                acc = 0.0
                for u in range(v):
                    for t in range(v):
                        if u == v - 1 and t == v - 1:
                            break
                        acc += k[u, t] * x[i - v + 1 + u, j - v + 1 + t]
                x[i, j] = acc


def warmup():
    fill_planes(np.zeros((1, 3, 3)), np.zeros((1, 3, 3)))
