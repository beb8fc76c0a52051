"""Closed-form 3x3 linear algebra.

Lower-triangular factors are stored as ``(..., 6)`` arrays in the order
``l11, l21, l22, l31, l32, l33``. Symmetric and general matrices are plain
``(..., 3, 3)`` arrays. Every routine broadcasts over leading axes so a whole
bank of Gaussians can be processed at once.
"""

from __future__ import annotations

import numpy as np

from .errors import NearSingular, Singular

DIAG_EPS = 1e-6
DET_EPS = 1e-8

# positions of the six stored entries inside a 3x3 matrix
TRI_ROWS = np.array([0, 1, 1, 2, 2, 2])
TRI_COLS = np.array([0, 0, 1, 0, 1, 2])
DIAG_SLOTS = np.array([0, 2, 5])
OFFDIAG_SLOTS = np.array([1, 3, 4])


def tri_to_mat(l):
    """Expand packed lower-triangular entries to dense ``(..., 3, 3)``."""
    l = np.asarray(l, dtype=float)
    out = np.zeros(l.shape[:-1] + (3, 3))
    out[..., TRI_ROWS, TRI_COLS] = l
    return out


def mat_to_tri(m):
    m = np.asarray(m, dtype=float)
    return m[..., TRI_ROWS, TRI_COLS].copy()


def chol_to_precision(l):
    """Return ``L @ L.T``.

    Entries are formed explicitly so the result is exactly symmetric.
    """
    l = np.asarray(l, dtype=float)
    a, b, c, d, e, f = (l[..., i] for i in range(6))
    p = np.empty(l.shape[:-1] + (3, 3))
    p[..., 0, 0] = a * a
    p[..., 1, 1] = b * b + c * c
    p[..., 2, 2] = d * d + e * e + f * f
    p[..., 0, 1] = p[..., 1, 0] = a * b
    p[..., 0, 2] = p[..., 2, 0] = a * d
    p[..., 1, 2] = p[..., 2, 1] = b * d + c * e
    return p


def _check_diag(l, eps):
    diag = np.abs(l[..., DIAG_SLOTS])
    if np.any(diag < eps) or not np.all(np.isfinite(l)):
        raise NearSingular(f"Cholesky diagonal below {eps:g}: min |l_ii| = {diag.min():.3g}")


def tri_inverse(l, eps=DIAG_EPS):
    """Inverse of a packed lower-triangular matrix by forward substitution."""
    l = np.asarray(l, dtype=float)
    _check_diag(l, eps)
    a, b, c, d, e, f = (l[..., i] for i in range(6))
    inv = np.zeros(l.shape[:-1] + (3, 3))
    inv[..., 0, 0] = 1.0 / a
    inv[..., 1, 1] = 1.0 / c
    inv[..., 2, 2] = 1.0 / f
    inv[..., 1, 0] = -b / (a * c)
    inv[..., 2, 1] = -e / (c * f)
    inv[..., 2, 0] = (b * e - c * d) / (a * c * f)
    return inv


def precision_to_covariance(l, eps=DIAG_EPS):
    """Return ``(L L^T)^{-1} = L^{-T} L^{-1}``.

    Raises NearSingular when any ``|l_ii| < eps``.
    """
    li = tri_inverse(l, eps)
    cov = np.einsum("...ki,...kj->...ij", li, li)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def quadratic_form(m, d):
    """``d^T M d`` over broadcast leading axes."""
    m = np.asarray(m, dtype=float)
    d = np.asarray(d, dtype=float)
    return np.einsum("...i,...ij,...j->...", d, m, d)


def sym_eig_max(m):
    """Largest eigenvalue of symmetric 3x3 matrices.

    Trigonometric solution of the characteristic cubic. When the two largest
    eigenvalues nearly coincide that formula loses half the digits, so the
    well-separated smallest eigenvalue is deflated out instead and the
    remaining 2x2 block is solved without cancellation.
    """
    m = np.asarray(m, dtype=float)
    a11, a22, a33 = m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]
    a12, a13, a23 = m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]
    p1 = a12 * a12 + a13 * a13 + a23 * a23
    q = (a11 + a22 + a33) / 3.0
    p2 = (a11 - q) ** 2 + (a22 - q) ** 2 + (a33 - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    b11, b22, b33 = (a11 - q) / safe_p, (a22 - q) / safe_p, (a33 - q) / safe_p
    b12, b13, b23 = a12 / safe_p, a13 / safe_p, a23 / safe_p
    det_b = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13) + b13 * (b12 * b23 - b22 * b13)
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    lam = q + 2.0 * p * np.cos(phi)
    if np.any(r < 0):
        lam = np.where(r < 0, _top_by_deflation(m, q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0), lam), lam)
    # p == 0 means a multiple of the identity
    return np.where(p > 0, lam, q)


def _top_by_deflation(m, low, fallback):
    a = m - low[..., None, None] * np.eye(3)
    rows = [a[..., i, :] for i in range(3)]
    cands = np.stack([np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])], -2)
    norms = np.linalg.norm(cands, axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.take_along_axis(cands, best[..., None, None], -2)[..., 0, :]
    nv = np.take_along_axis(norms, best[..., None], -1)[..., 0]
    ok = nv > 0
    v = v / np.where(ok, nv, 1.0)[..., None]
    # orthonormal complement of v
    helper = np.where((np.abs(v[..., 0]) < 0.9)[..., None], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    u = np.cross(v, helper)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    w = np.cross(v, u)
    mu, mw = np.einsum("...ij,...j->...i", m, u), np.einsum("...ij,...j->...i", m, w)
    a, b, c = (u * mu).sum(-1), (u * mw).sum(-1), (w * mw).sum(-1)
    top = 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
    return np.where(ok, top, fallback)


def det3(t):
    t = np.asarray(t, dtype=float)
    return (
        t[..., 0, 0] * (t[..., 1, 1] * t[..., 2, 2] - t[..., 1, 2] * t[..., 2, 1])
        - t[..., 0, 1] * (t[..., 1, 0] * t[..., 2, 2] - t[..., 1, 2] * t[..., 2, 0])
        + t[..., 0, 2] * (t[..., 1, 0] * t[..., 2, 1] - t[..., 1, 1] * t[..., 2, 0])
    )


def mat3_inverse(t, eps=DET_EPS):
    """Inverse via the adjugate. Raises Singular when ``|det| < eps``."""
    t = np.asarray(t, dtype=float)
    det = det3(t)
    if np.any(np.abs(det) < eps) or not np.all(np.isfinite(t)):
        raise Singular(f"determinant {np.min(np.abs(det)):.3g} below {eps:g}")
    adj = np.empty(t.shape)
    adj[..., 0, 0] = t[..., 1, 1] * t[..., 2, 2] - t[..., 1, 2] * t[..., 2, 1]
    adj[..., 0, 1] = t[..., 0, 2] * t[..., 2, 1] - t[..., 0, 1] * t[..., 2, 2]
    adj[..., 0, 2] = t[..., 0, 1] * t[..., 1, 2] - t[..., 0, 2] * t[..., 1, 1]
    adj[..., 1, 0] = t[..., 1, 2] * t[..., 2, 0] - t[..., 1, 0] * t[..., 2, 2]
    adj[..., 1, 1] = t[..., 0, 0] * t[..., 2, 2] - t[..., 0, 2] * t[..., 2, 0]
    adj[..., 1, 2] = t[..., 0, 2] * t[..., 1, 0] - t[..., 0, 0] * t[..., 1, 2]
    adj[..., 2, 0] = t[..., 1, 0] * t[..., 2, 1] - t[..., 1, 1] * t[..., 2, 0]
    adj[..., 2, 1] = t[..., 0, 1] * t[..., 2, 0] - t[..., 0, 0] * t[..., 2, 1]
    adj[..., 2, 2] = t[..., 0, 0] * t[..., 1, 1] - t[..., 0, 1] * t[..., 1, 0]
    return adj / det[..., None, None]


def cholesky3(p, jitter=1e-10):
    """Packed lower Cholesky factor of symmetric PSD 3x3 matrices.

    Pivots that come out non-positive are replaced by ``sqrt(jitter)`` so
    that semi-definite inputs still produce a finite factor.
    """
    p = np.asarray(p, dtype=float)
    floor = np.sqrt(jitter)
    a = np.sqrt(np.maximum(p[..., 0, 0], jitter))
    a = np.where(a > floor, a, floor)
    b = p[..., 1, 0] / a
    d = p[..., 2, 0] / a
    c = np.sqrt(np.maximum(p[..., 1, 1] - b * b, jitter))
    e = (p[..., 2, 1] - b * d) / c
    f = np.sqrt(np.maximum(p[..., 2, 2] - d * d - e * e, jitter))
    return np.stack([a, b, c, d, e, f], axis=-1)


def rotation_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
