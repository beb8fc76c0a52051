"""Compiled per-point kernels for encoding with optional pair filtering.

Every point's activation row comes out of the same scalar loop, whatever the
point's position in the cloud. Per-point values are therefore bit-identical
under any permutation, and filtered pairs are skipped without gathering.

Filter inputs that do not apply are passed as ``None``; numba compiles a
separate specialization per combination and drops the dead branches.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _phi(x0, x1, x2, means, prec, g):
    d0 = x0 - means[g, 0]
    d1 = x1 - means[g, 1]
    d2 = x2 - means[g, 2]
    q = (prec[g, 0, 0] * d0 * d0 + prec[g, 1, 1] * d1 * d1 + prec[g, 2, 2] * d2 * d2
         + 2.0 * (prec[g, 0, 1] * d0 * d1 + prec[g, 0, 2] * d0 * d2 + prec[g, 1, 2] * d1 * d2))
    return math.exp(-0.5 * q)


@njit(cache=True)
def _row(points, i, means, prec, alpha, radius_sq, half, active, table, cells, row, kept, phis):
    """Fill ``row`` for point ``i``; returns how many Gaussians were evaluated."""
    x0, x1, x2 = points[i, 0], points[i, 1], points[i, 2]
    m = 0
    if radius_sq is not None:
        for g in range(alpha.shape[0]):
            d0 = x0 - means[g, 0]
            d1 = x1 - means[g, 1]
            d2 = x2 - means[g, 2]
            if active[g] and d0 * d0 + d1 * d1 + d2 * d2 <= radius_sq[g]:
                kept[m] = g
                m += 1
    elif half is not None:
        for g in range(alpha.shape[0]):
            if (active[g] and abs(x0 - means[g, 0]) <= half[g, 0] and abs(x1 - means[g, 1]) <= half[g, 1]
                    and abs(x2 - means[g, 2]) <= half[g, 2]):
                kept[m] = g
                m += 1
    elif table is not None and cells[i] >= 0:
        c = cells[i]
        for g in range(alpha.shape[0]):
            if table[c, g]:
                kept[m] = g
                m += 1
    else:
        for g in range(alpha.shape[0]):
            kept[g] = g
        m = alpha.shape[0]
    for j in range(m):
        phis[j] = _phi(x0, x1, x2, means, prec, kept[j])
    row[:] = 0.0
    for j in range(m):
        g = kept[j]
        p = phis[j]
        for k in range(alpha.shape[1]):
            row[k] = row[k] + p * alpha[g, k]
    return m


@njit(cache=True)
def encode_rows(points, means, prec, alpha, radius_sq, half, active, table, cells):
    """Per-point activations without bias, ``(N, K)``, plus evaluated pair count."""
    n, k = points.shape[0], alpha.shape[1]
    out = np.empty((n, k))
    row = np.empty(k)
    kept = np.empty(alpha.shape[0], dtype=np.int64)
    phis = np.empty(alpha.shape[0])
    pairs = 0
    for i in range(n):
        pairs += _row(points, i, means, prec, alpha, radius_sq, half, active, table, cells, row, kept, phis)
        out[i, :] = row
    return out, pairs


@njit(cache=True)
def encode_pooled(points, means, prec, alpha, radius_sq, half, active, table, cells):
    """Column max of the activations (first point wins ties), argmax, pair count."""
    n, k = points.shape[0], alpha.shape[1]
    best = np.empty(k)
    best_idx = np.zeros(k, dtype=np.int64)
    row = np.empty(k)
    kept = np.empty(alpha.shape[0], dtype=np.int64)
    phis = np.empty(alpha.shape[0])
    pairs = 0
    for i in range(n):
        pairs += _row(points, i, means, prec, alpha, radius_sq, half, active, table, cells, row, kept, phis)
        if i == 0:
            best[:] = row
        else:
            for j in range(k):
                if row[j] > best[j]:
                    best[j] = row[j]
                    best_idx[j] = i
    return best, best_idx, pairs


def _arr(a, dtype):
    return None if a is None else np.ascontiguousarray(a, dtype=dtype)


def kernel_args(points, means, prec, alpha, radius_sq=None, half=None, active=None, table=None, cells=None):
    """Contiguous float64/bool/int64 arguments for :func:`encode_rows` and :func:`encode_pooled`."""
    return (
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(prec, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        _arr(radius_sq, np.float64),
        _arr(half, np.float64),
        _arr(active, np.bool_),
        _arr(table, np.bool_),
        _arr(cells, np.int64),
    )
