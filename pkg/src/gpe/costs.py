"""Analytic multiply-add and parameter counts, plus an instrumented cross-check.

One multiply-add counts as one operation. Multiplications by literal
constants (the ``2`` and ``-1/2`` in the quadratic form) are folded and
not counted; ``exp`` is not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import GPEClassifier, GaussianEncoder
from .pointnet import CLASSIFIER_HIDDEN, ENCODER_WIDTHS, TNET_POINT_WIDTHS, TNET_REGRESSOR_WIDTHS, PointNetModel

QUAD_FORM_MACS = 12  # six products of two factors each
TRANSFORM_MACS_PER_GAUSSIAN = 9 + 54  # T^-1 mu, then T^T P T
INVERSE_3X3_MACS = 30  # 18 for cofactors, 3 for det, 9 for the scaling


def mlp_macs(widths):
    return sum(a * b for a, b in zip(widths[:-1], widths[1:]))


def mlp_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


@dataclass(frozen=True)
class GPEArch:
    n_gaussians: int
    n_volumes: int
    tnet_gaussians: int | None = None
    tnet_volumes: int | None = None
    regressor_widths: tuple | None = None
    head_widths: tuple | None = None

    @classmethod
    def of(cls, model):
        if isinstance(model, GaussianEncoder):
            return cls(model.n_gaussians, model.n_volumes)
        t = model.tnet
        return cls(
            model.encoder.n_gaussians, model.encoder.n_volumes,
            None if t is None else t.encoder.n_gaussians,
            None if t is None else t.encoder.n_volumes,
            None if t is None else tuple(t.regressor.widths),
            None if model.head is None else tuple(model.head.widths),
        )

    @property
    def has_tnet(self):
        return self.tnet_gaussians is not None


def encoder_macs(n_gaussians, n_volumes, n_points, pairs=None):
    """Likelihood plus mixer work; ``pairs`` overrides ``N * N_G`` when filtering."""
    if pairs is None:
        pairs = n_points * n_gaussians
    return pairs * (QUAD_FORM_MACS + n_volumes)


def count_macs_gpe(model_or_arch, n_points, filter_stats=None, tnet_filter_stats=None,
                   include_tnet=True, include_head=True):
    """Per-sample multiply-adds of a 3DGPE model (pure function of its shapes).

    ``filter_stats`` / ``tnet_filter_stats`` supply surviving pair counts for
    the main and T-Net encoders respectively.
    """
    a = model_or_arch if isinstance(model_or_arch, GPEArch) else GPEArch.of(model_or_arch)
    total = encoder_macs(a.n_gaussians, a.n_volumes, n_points,
                         None if filter_stats is None else filter_stats.pairs_evaluated)
    if include_tnet and a.has_tnet:
        total += encoder_macs(a.tnet_gaussians, a.tnet_volumes, n_points,
                              None if tnet_filter_stats is None else tnet_filter_stats.pairs_evaluated)
        total += mlp_macs(a.regressor_widths) + INVERSE_3X3_MACS + a.n_gaussians * TRANSFORM_MACS_PER_GAUSSIAN
    if include_head and a.head_widths is not None:
        total += mlp_macs(a.head_widths)
    return int(total)


@dataclass(frozen=True)
class PointNetArch:
    tnet_widths: tuple = TNET_POINT_WIDTHS
    regressor_widths: tuple = TNET_REGRESSOR_WIDTHS
    encoder_widths: tuple = ENCODER_WIDTHS
    head_widths: tuple = (ENCODER_WIDTHS[-1],) + CLASSIFIER_HIDDEN + (40,)

    @classmethod
    def of(cls, model: PointNetModel):
        return cls(*(tuple(s.widths) for s in model.stacks()))


def count_macs_pointnet(model_or_arch, n_points, include_head=True):
    """Per-point layers times ``N``, plus the 3x3 point transform, regressor and head."""
    a = model_or_arch if isinstance(model_or_arch, PointNetArch) else PointNetArch.of(model_or_arch)
    total = n_points * (mlp_macs(a.tnet_widths) + 9 + mlp_macs(a.encoder_widths))
    total += mlp_macs(a.regressor_widths)
    if include_head:
        total += mlp_macs(a.head_widths)
    return int(total)


def count_params_gpe(model_or_arch):
    a = model_or_arch if isinstance(model_or_arch, GPEArch) else GPEArch.of(model_or_arch)
    n = a.n_gaussians * (9 + a.n_volumes) + a.n_volumes
    if a.has_tnet:
        n += a.tnet_gaussians * (9 + a.tnet_volumes) + a.tnet_volumes + mlp_params(a.regressor_widths)
    if a.head_widths is not None:
        n += mlp_params(a.head_widths)
    return n


def count_params_pointnet(model_or_arch):
    a = model_or_arch if isinstance(model_or_arch, PointNetArch) else PointNetArch.of(model_or_arch)
    return sum(mlp_params(w) for w in (a.tnet_widths, a.regressor_widths, a.encoder_widths, a.head_widths))


def reference_gpe_arch(n_classes=40):
    """Reference 3DGPE shape: N_G=32, K=1024, a 1024-wide Gaussian T-Net and a 512-256 head."""
    return GPEArch(32, 1024, 32, 1024, TNET_REGRESSOR_WIDTHS, (1024,) + CLASSIFIER_HIDDEN + (n_classes,))


PRESETS = {
    # Gaussian encoder and mixer only; T-Net and head are excluded from the MAC count
    "table1-gpe": lambda: (count_macs_gpe(reference_gpe_arch(), 2048, include_tnet=False, include_head=False),
                           count_params_gpe(reference_gpe_arch())),
    "table1-pointnet": lambda: (count_macs_pointnet(PointNetArch(), 2048), count_params_pointnet(PointNetArch())),
}


def peak_alloc_estimate_gpe(model_or_arch, n_points):
    """Parameters plus the largest live activation buffers, in bytes (float64)."""
    a = model_or_arch if isinstance(model_or_arch, GPEArch) else GPEArch.of(model_or_arch)
    acts = n_points * a.n_gaussians * 4 + n_points * a.n_volumes
    if a.has_tnet:
        acts = max(acts, n_points * a.tnet_gaussians * 4 + n_points * a.tnet_volumes)
    return 8 * (count_params_gpe(a) + acts)


def peak_alloc_estimate_pointnet(model_or_arch, n_points):
    a = model_or_arch if isinstance(model_or_arch, PointNetArch) else PointNetArch.of(model_or_arch)
    widest = max(max(a.tnet_widths), max(a.encoder_widths))
    return 8 * (count_params_pointnet(a) + 2 * n_points * widest)


@dataclass
class CostReport:
    macs_per_sample: int
    params: int
    latency_stats: dict = field(default_factory=dict)
    peak_alloc_estimate: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        rows = [("MACs/sample", f"{self.macs_per_sample:,} ({self.macs_per_sample / 1e9:.3f}G)"),
                ("params", f"{self.params:,} ({self.params / 1e6:.3f}M)"),
                ("peak alloc (est.)", f"{self.peak_alloc_estimate / 2**20:.2f} MiB")]
        for k in ("mean", "p50", "p95"):
            if k in self.latency_stats:
                rows.append((f"latency {k}", f"{self.latency_stats[k]:.3f} ms"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# ------------------------------------------------------------- instrumented

class MacCounter:
    """Arithmetic helpers that tally every scalar multiplication they perform."""

    def __init__(self):
        self.count = 0

    def mul(self, a, b):
        out = np.multiply(a, b)
        self.count += out.size
        return out

    def matmul(self, a, b):
        a, b = np.asarray(a), np.asarray(b)
        self.count += a.size // a.shape[-1] * b.size if b.ndim == 2 else a.size // a.shape[-1] * b.shape[0]
        return a @ b

    def mlp(self, stack, x):
        for layer in stack.layers:
            x = self.matmul(x, layer.weight.T) + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x

    def inverse3(self, t):
        cof = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                r = [k for k in range(3) if k != i]
                c = [k for k in range(3) if k != j]
                m = t[np.ix_(r, c)]
                cof[i, j] = (-1) ** (i + j) * (self.mul(m[0, 0], m[1, 1]) - self.mul(m[0, 1], m[1, 0]))
        det = float(self.matmul(t[0], cof[0]))
        return self.mul(cof.T, 1.0 / det)

    def encode(self, means, prec, alpha, bias, points):
        d = points[:, None, :] - means[None]
        d0, d1, d2 = d[..., 0], d[..., 1], d[..., 2]
        q = (self.mul(self.mul(prec[:, 0, 0], d0), d0) + self.mul(self.mul(prec[:, 1, 1], d1), d1)
             + self.mul(self.mul(prec[:, 2, 2], d2), d2)
             + 2.0 * (self.mul(self.mul(prec[:, 0, 1], d0), d1) + self.mul(self.mul(prec[:, 0, 2], d0), d2)
                      + self.mul(self.mul(prec[:, 1, 2], d1), d2)))
        phi = np.exp(-0.5 * q)
        return self.matmul(phi, alpha).max(axis=0) + bias


def instrumented_macs_gpe(model, points, include_head=True):
    """Run a counting forward pass; returns ``(output, count)``."""
    c = MacCounter()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    clf = GPEClassifier(model, None, None) if isinstance(model, GaussianEncoder) else model
    enc = clf.encoder
    means, prec = enc.means, enc.precision
    if clf.tnet is not None:
        te = clf.tnet.encoder
        feat = c.encode(te.means, te.precision, te.alpha, te.bias, points)
        t = np.eye(3) + c.mlp(clf.tnet.regressor, feat[None])[0].reshape(3, 3)
        t_inv = c.inverse3(t)
        means = np.stack([c.matmul(t_inv, m) for m in means])
        prec = np.stack([c.matmul(c.matmul(t.T, p), t) for p in prec])
    out = c.encode(means, prec, enc.alpha, enc.bias, points)
    if include_head and clf.head is not None:
        out = c.mlp(clf.head, out[None])[0]
    return out, c.count


def instrumented_macs_pointnet(model: PointNetModel, points, include_head=True):
    c = MacCounter()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    feat = c.mlp(model.tnet_mlp, points).max(axis=0)
    t = np.eye(3) + c.mlp(model.tnet_reg, feat[None])[0].reshape(3, 3)
    x = c.matmul(points, t.T)
    out = c.mlp(model.encoder, x).max(axis=0)
    if include_head:
        out = c.mlp(model.classifier, out[None])[0]
    return out, c.count
