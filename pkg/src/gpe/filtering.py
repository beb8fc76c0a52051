"""Inference-time Gaussian-point pair filtering.

A pair ``(x, g)`` is skipped when a cheap test proves ``alpha_max[g] *
phi_g(x) < t``; the skipped likelihood is treated as zero. Three tests are
provided: an isotropic radius, an axis-aligned box around the confidence
ellipsoid, and a precomputed voxel table.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .encoder import GaussianEncoder, GlobalFeature, mahalanobis_sq, offsets, tnet_predict
from .errors import ConfigError, DomainViolation
from .kernels import encode_pooled, kernel_args
from .linalg import precision_to_covariance, sym_eig_max

METHODS = ("none", "distance", "bbox", "voxel")


@dataclass
class FilterConfig:
    method: str = "none"
    t_distance: float = 0.1
    t_bbox: float = 0.1
    t_voxel: float = 0.1
    d_voxel: int = 8
    domain: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    domain_slack: float = 1.0
    fallback: bool = True
    filter_tnet: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown filter method {self.method!r}")
        for name in ("t_distance", "t_bbox", "t_voxel"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.d_voxel < 1:
            raise ConfigError("d_voxel must be >= 1")

    @property
    def threshold(self):
        return {"distance": self.t_distance, "bbox": self.t_bbox, "voxel": self.t_voxel}.get(self.method, 0.0)

    def domain_box(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.domain)
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * self.domain_slack
        return center - half, center + half


@dataclass
class DistanceBounds:
    means: np.ndarray
    radius_sq: np.ndarray  # (G,)
    active: np.ndarray  # (G,) bool

    def mask(self, points):
        d2 = ((points[:, None, :] - self.means[None]) ** 2).sum(axis=-1)
        return (d2 <= self.radius_sq) & self.active


@dataclass
class BBoxBounds:
    means: np.ndarray
    half_extent: np.ndarray  # (G, 3)
    active: np.ndarray

    def mask(self, points):
        d = np.abs(points[:, None, :] - self.means[None])
        return (d <= self.half_extent).all(axis=-1) & self.active


@dataclass
class VoxelTable:
    lo: np.ndarray
    hi: np.ndarray
    d_voxel: int
    table: np.ndarray  # (d^3, G) bool
    cell_max: np.ndarray = field(repr=False)  # (d^3, G) max weighted likelihood
    fallback: bool = True

    def cells(self, points):
        """Flat cell index per point, ``-1`` outside the domain."""
        size = (self.hi - self.lo) / self.d_voxel
        ijk = np.floor((points - self.lo) / size).astype(int)
        # points exactly on the upper face belong to the last cell
        on_hi = points == self.hi
        ijk = np.where(on_hi, self.d_voxel - 1, ijk)
        inside = ((ijk >= 0) & (ijk < self.d_voxel)).all(axis=1)
        flat = (ijk[:, 0] * self.d_voxel + ijk[:, 1]) * self.d_voxel + ijk[:, 2]
        return np.where(inside, flat, -1)

    def cell_lists(self):
        return [np.flatnonzero(row) for row in self.table]

    def mask(self, points):
        cells = self.cells(points)
        outside = cells < 0
        if outside.any() and not self.fallback:
            raise DomainViolation(f"{int(outside.sum())} points outside the voxel domain")
        m = self.table[np.where(outside, 0, cells)]
        m[outside] = True
        return m


def alpha_max(model: GaussianEncoder, g=None):
    """``max_k |alpha[g, k]|`` for one Gaussian or all of them."""
    a = np.abs(model.alpha).max(axis=1)
    return a if g is None else float(a[g])


def _log_ratio(model, t):
    am = alpha_max(model)
    active = am > t
    return np.where(active, np.log(np.where(active, am, 1.0) / t), 0.0), active


def build_distance_bounds(model: GaussianEncoder, t_distance) -> DistanceBounds:
    log_ratio, active = _log_ratio(model, t_distance)
    lam = sym_eig_max(precision_to_covariance(model.chol))
    return DistanceBounds(model.means.copy(), 2.0 * lam * log_ratio, active)


def build_bboxes(model: GaussianEncoder, t_bbox) -> BBoxBounds:
    log_ratio, active = _log_ratio(model, t_bbox)
    var = np.diagonal(precision_to_covariance(model.chol), axis1=1, axis2=2)
    return BBoxBounds(model.means.copy(), np.sqrt(2.0 * log_ratio[:, None] * var), active)


def _box_qp_exact(prec, mu, lo, hi):
    """Minimum of ``(x-mu)^T P (x-mu)`` over boxes by enumerating KKT faces."""
    m = len(mu)
    best = np.full(m, np.inf)
    tol = 1e-12
    for pattern in itertools.product((0, 1, 2), repeat=3):  # free / lower / upper
        x = np.empty((m, 3))
        fixed = [i for i in range(3) if pattern[i]]
        free = [i for i in range(3) if not pattern[i]]
        for i in fixed:
            x[:, i] = lo[:, i] if pattern[i] == 1 else hi[:, i]
        ok = np.ones(m, dtype=bool)
        if free:
            pff = prec[:, free][:, :, free]
            rhs = np.zeros((m, len(free)))
            for i in fixed:
                rhs -= prec[:, free, i] * (x[:, i] - mu[:, i])[:, None]
            det = np.linalg.det(pff)
            ok &= np.abs(det) > 1e-300
            safe = np.where(ok[:, None, None], pff, np.eye(len(free)))
            sol = np.linalg.solve(safe, rhs[..., None])[..., 0]
            for j, i in enumerate(free):
                x[:, i] = mu[:, i] + sol[:, j]
                ok &= (x[:, i] >= lo[:, i] - tol) & (x[:, i] <= hi[:, i] + tol)
            x = np.clip(x, lo, hi)
        d = x - mu
        q = np.einsum("mi,mij,mj->m", d, prec, d)
        best = np.where(ok & (q < best), q, best)
    return np.maximum(best, 0.0)


def box_qp_min(prec, mu, lo, hi, sweeps=100, tol=1e-10):
    """Minimise ``(x-mu)^T P (x-mu)`` over ``lo <= x <= hi`` for a batch.

    Projected coordinate descent from the clamped mean; problems that have
    not converged after ``sweeps`` passes are finished by exact face
    enumeration.
    """
    x = np.clip(mu, lo, hi)
    diag = np.diagonal(prec, axis1=1, axis2=2)
    safe = np.where(diag > 0, diag, 1.0)
    converged = np.zeros(len(mu), dtype=bool)
    for _ in range(sweeps):
        change = np.zeros(len(mu))
        for i in range(3):
            d = x - mu
            off = np.einsum("mj,mj->m", prec[:, i, :], d) - prec[:, i, i] * d[:, i]
            new = np.where(diag[:, i] > 0, mu[:, i] - off / safe[:, i], x[:, i])
            new = np.clip(new, lo[:, i], hi[:, i])
            change = np.maximum(change, np.abs(new - x[:, i]))
            x[:, i] = new
        converged = change < tol
        if converged.all():
            break
    d = x - mu
    q = np.einsum("mi,mij,mj->m", d, prec, d)
    if not converged.all():
        idx = np.flatnonzero(~converged)
        q[idx] = np.minimum(q[idx], _box_qp_exact(prec[idx], mu[idx], lo[idx], hi[idx]))
    return q


def build_voxel_table(model: GaussianEncoder, t_voxel, d_voxel, domain, fallback=True) -> VoxelTable:
    lo, hi = (np.asarray(b, dtype=float) for b in domain)
    edges = [np.linspace(lo[a], hi[a], d_voxel + 1) for a in range(3)]
    ii, jj, kk = np.meshgrid(np.arange(d_voxel), np.arange(d_voxel), np.arange(d_voxel), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    cell_lo = np.stack([edges[0][ii], edges[1][jj], edges[2][kk]], axis=1)
    cell_hi = np.stack([edges[0][ii + 1], edges[1][jj + 1], edges[2][kk + 1]], axis=1)
    n_cells, g = len(cell_lo), model.n_gaussians
    am = alpha_max(model)
    cell_max = np.zeros((n_cells, g))
    for gi in np.flatnonzero(am >= t_voxel):
        q = box_qp_min(
            np.broadcast_to(model.precision[gi], (n_cells, 3, 3)),
            np.broadcast_to(model.means[gi], (n_cells, 3)),
            cell_lo, cell_hi,
        )
        cell_max[:, gi] = am[gi] * np.exp(-0.5 * q)
    return VoxelTable(lo, hi, d_voxel, cell_max >= t_voxel, cell_max, fallback)


def build_filter(model: GaussianEncoder, config: FilterConfig):
    """Bounds for ``config.method`` (``None`` when filtering is off)."""
    if config.method == "distance":
        return build_distance_bounds(model, config.t_distance)
    if config.method == "bbox":
        return build_bboxes(model, config.t_bbox)
    if config.method == "voxel":
        return build_voxel_table(model, config.t_voxel, config.d_voxel, config.domain_box(), config.fallback)
    return None


@dataclass
class FilterStats:
    pairs_total: int
    pairs_evaluated: int

    @property
    def fraction_filtered(self):
        return 1.0 - self.pairs_evaluated / max(self.pairs_total, 1)


def filter_mask(model: GaussianEncoder, points, bounds):
    """Boolean ``(N, N_G)`` array of pairs whose likelihood gets evaluated."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if bounds is None:
        return np.ones((len(points), model.n_gaussians), dtype=bool)
    return bounds.mask(points)


def filtered_encode_cloud(model: GaussianEncoder, points, bounds, return_stats=False):
    """Max-pooled activations with filtered pairs' likelihood set to zero.

    ``bounds`` of ``None`` evaluates every pair, exactly like ``encode_cloud``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    kw = {}
    if isinstance(bounds, DistanceBounds):
        kw = {"radius_sq": bounds.radius_sq, "active": bounds.active}
    elif isinstance(bounds, BBoxBounds):
        kw = {"half": bounds.half_extent, "active": bounds.active}
    elif isinstance(bounds, VoxelTable):
        cells = bounds.cells(points)
        if not bounds.fallback and (cells < 0).any():
            raise DomainViolation(f"{int((cells < 0).sum())} points outside the voxel domain")
        kw = {"table": bounds.table, "cells": cells}
    elif bounds is not None:
        raise TypeError(f"unsupported bounds {type(bounds).__name__}")
    best, am, pairs = encode_pooled(*kernel_args(points, model.means, model.precision, model.alpha, **kw))
    feat = GlobalFeature(best + model.bias, am)
    if return_stats:
        return feat, FilterStats(len(points) * model.n_gaussians, int(pairs))
    return feat


def exact_weighted_likelihood(model: GaussianEncoder, points):
    """``alpha_max[g] * phi_g(x)`` for all pairs, evaluated without any filter."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    phi = np.exp(-0.5 * mahalanobis_sq(model.precision, offsets(model.means, points)))
    return phi * alpha_max(model)[None, :]


@dataclass
class FilteredClassifier:
    """Classifier inference with filter bounds built once per model.

    With a T-Net the main encoder's bounds live in transformed point space,
    so points are mapped by ``T`` for both the test and the evaluation.
    """

    encoder: GaussianEncoder
    tnet: object
    head: object
    config: FilterConfig
    bounds: object = None
    tnet_bounds: object = None

    @classmethod
    def build(cls, clf, config: FilterConfig):
        tb = None
        if clf.tnet is not None and config.filter_tnet:
            tb = build_filter(clf.tnet.encoder, config)
        return cls(clf.encoder, clf.tnet, clf.head, config, build_filter(clf.encoder, config), tb)

    def features(self, points, return_stats=False):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        total = FilterStats(0, 0)
        if self.tnet is not None:
            if self.tnet_bounds is not None:
                tf, st = filtered_encode_cloud(self.tnet.encoder, points, self.tnet_bounds, True)
                total = FilterStats(total.pairs_total + st.pairs_total, total.pairs_evaluated + st.pairs_evaluated)
                t = np.eye(3) + self.tnet.regressor(tf.values[None, :])[0].reshape(3, 3)
            else:
                t = tnet_predict(self.tnet, points)
            points = np.einsum("ij,nj->ni", t, points)
        feat, st = filtered_encode_cloud(self.encoder, points, self.bounds, True)
        total = FilterStats(total.pairs_total + st.pairs_total, total.pairs_evaluated + st.pairs_evaluated)
        return (feat, total) if return_stats else feat

    def logits(self, points):
        return self.head(self.features(points).values[None, :])[0]

    def predict(self, clouds):
        return np.array([int(np.argmax(self.logits(p))) for p in clouds])
