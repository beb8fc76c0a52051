"""Gaussian point encoder forward path.

A bank of ``N_G`` anisotropic Gaussians produces likelihoods for every point;
an affine mixer turns them into ``K`` activation volumes which are max-pooled
over the cloud.

Inference runs through the compiled kernels in :mod:`gpe.kernels`, which
produce each point's row with identical arithmetic wherever the point sits
in the cloud. BLAS gemm does not guarantee that, so :func:`mix` (gemm) is
used only on training paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import encode_pooled, encode_rows, kernel_args
from .linalg import cholesky3, chol_to_precision, mat3_inverse
from .mlp import MLP


class GaussianEncoder:
    """Gaussian basis plus mixer: ``l_k(x) = sum_g alpha[g,k] phi_g(x) + bias[k]``."""

    def __init__(self, means, chol, alpha, bias, precision=None):
        self.means = np.array(means, dtype=float).reshape(-1, 3)
        self.chol = np.array(chol, dtype=float).reshape(-1, 6)
        self.alpha = np.array(alpha, dtype=float).reshape(len(self.means), -1)
        self.bias = np.array(bias, dtype=float).reshape(-1)
        if len(self.chol) != len(self.means) or len(self.bias) != self.alpha.shape[1]:
            raise ValueError("inconsistent encoder parameter shapes")
        if len(self.means) < 1 or len(self.bias) < 1:
            raise ValueError("need at least one Gaussian and one volume")
        if precision is None:
            self.refresh()
        else:
            self.precision = np.array(precision, dtype=float)

    @classmethod
    def random(cls, n_gaussians, n_volumes, rng, init_scale=2.0):
        """Means uniform in the cube, ``L = init_scale * I``, ``alpha ~ N(0, 1/sqrt(N_G))``."""
        means = rng.uniform(-1.0, 1.0, size=(n_gaussians, 3))
        chol = np.zeros((n_gaussians, 6))
        chol[:, [0, 2, 5]] = init_scale
        alpha = rng.normal(0.0, 1.0 / np.sqrt(n_gaussians), size=(n_gaussians, n_volumes))
        return cls(means, chol, alpha, np.zeros(n_volumes))

    def refresh(self):
        """Recompute the cached precision from the Cholesky parameters."""
        self.precision = chol_to_precision(self.chol)

    @property
    def n_gaussians(self):
        return self.alpha.shape[0]

    @property
    def n_volumes(self):
        return self.alpha.shape[1]

    @property
    def n_params(self):
        return self.means.size + self.chol.size + self.alpha.size + self.bias.size

    def copy(self):
        return GaussianEncoder(self.means, self.chol, self.alpha, self.bias, self.precision.copy())

    def params(self, prefix):
        return {
            f"{prefix}.means": self.means,
            f"{prefix}.chol": self.chol,
            f"{prefix}.alpha": self.alpha,
            f"{prefix}.bias": self.bias,
        }

    def __repr__(self):
        return f"GaussianEncoder(N_G={self.n_gaussians}, K={self.n_volumes})"


@dataclass
class GlobalFeature:
    values: np.ndarray  # (K,)
    argmax_point: np.ndarray  # (K,) int


@dataclass
class TNet:
    """Gaussian encoder followed by a regressor predicting ``I + R``."""

    encoder: GaussianEncoder
    regressor: MLP

    def copy(self):
        return TNet(self.encoder.copy(), self.regressor.copy())

    @property
    def n_params(self):
        return self.encoder.n_params + self.regressor.n_params


def offsets(means, points):
    """``x_i - mu_g`` as an ``(N, G, 3)`` array."""
    return points[:, None, :] - means[None, :, :]


def mahalanobis_sq(precision, d):
    """Quadratic form of each ``(N, G, 3)`` offset under its Gaussian's precision."""
    p = precision
    d0, d1, d2 = d[..., 0], d[..., 1], d[..., 2]
    return (
        p[:, 0, 0] * d0 * d0
        + p[:, 1, 1] * d1 * d1
        + p[:, 2, 2] * d2 * d2
        + 2.0 * (p[:, 0, 1] * d0 * d1 + p[:, 0, 2] * d0 * d2 + p[:, 1, 2] * d1 * d2)
    )


def likelihoods(model: GaussianEncoder, points):
    """Unweighted likelihoods ``phi`` of shape ``(N, N_G)``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return np.exp(-0.5 * mahalanobis_sq(model.precision, offsets(model.means, points)))


def likelihood(model: GaussianEncoder, g, x):
    """``phi_g(x)`` for a single Gaussian and point."""
    d = np.asarray(x, dtype=float) - model.means[g]
    return float(np.exp(-0.5 * d @ model.precision[g] @ d))


def mix(phi, alpha):
    """Mixer as a matrix product (training paths)."""
    return phi @ alpha


def encode_points(model: GaussianEncoder, points):
    """Per-point activations ``(N, K)``, bias included."""
    act, _ = encode_rows(*kernel_args(points, model.means, model.precision, model.alpha))
    return act + model.bias


def encode_point(model: GaussianEncoder, x):
    return encode_points(model, np.asarray(x, dtype=float).reshape(1, 3))[0]


def column_argmax(act):
    """Row of each column's maximum, lowest row on ties.

    Equivalent to ``argmax(axis=0)`` but avoids its slow strided scan.
    """
    n, k = act.shape
    flat = np.flatnonzero(act == act.max(axis=0))
    am = np.full(k, n)
    np.minimum.at(am, flat % k, flat // k)
    if (am == n).any():  # NaN columns
        am = np.argmax(act, axis=0)
    return am


def pool(act, bias):
    """Max over points (lowest index on ties), bias added after the max."""
    am = column_argmax(act)
    return GlobalFeature(act[am, np.arange(act.shape[1])] + bias, am)


def encode_cloud(model: GaussianEncoder, points) -> GlobalFeature:
    best, am, _ = encode_pooled(*kernel_args(points, model.means, model.precision, model.alpha))
    return GlobalFeature(best + model.bias, am)


def transformed_gaussians(means, precision, t):
    """Means and precisions seen by untransformed points when points are mapped by ``t``."""
    t_inv = mat3_inverse(t)
    new_means = means @ t_inv.T
    new_prec = np.einsum("ai,gab,bj->gij", t, precision, t)
    new_prec = 0.5 * (new_prec + np.swapaxes(new_prec, 1, 2))
    return new_means, new_prec, t_inv


def apply_inverse_transform(model: GaussianEncoder, t) -> GaussianEncoder:
    """Model whose output at ``x`` equals the original model's at ``t @ x``."""
    t = np.asarray(t, dtype=float)
    new_means, new_prec, _ = transformed_gaussians(model.means, model.precision, t)
    return GaussianEncoder(new_means, cholesky3(new_prec), model.alpha, model.bias, precision=new_prec)


def tnet_predict(tnet: TNet, points):
    feat = encode_cloud(tnet.encoder, points).values
    return np.eye(3) + tnet.regressor(feat[None, :])[0].reshape(3, 3)


def forward_classify(model: GaussianEncoder, tnet: TNet | None, classifier: MLP, points):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if tnet is not None:
        model = apply_inverse_transform(model, tnet_predict(tnet, points))
    feat = encode_cloud(model, points).values
    return classifier(feat[None, :])[0]


@dataclass
class GPEClassifier:
    """Encoder, optional T-Net and classifier head bundled together."""

    encoder: GaussianEncoder
    tnet: TNet | None
    head: MLP

    def logits(self, points):
        return forward_classify(self.encoder, self.tnet, self.head, points)

    def predict(self, clouds):
        return np.array([int(np.argmax(self.logits(p))) for p in clouds])

    def encoders(self):
        out = {"enc": self.encoder}
        if self.tnet is not None:
            out["tnet.enc"] = self.tnet.encoder
        return out

    def params(self):
        out = self.encoder.params("enc")
        if self.tnet is not None:
            out.update(self.tnet.encoder.params("tnet.enc"))
            out.update(self.tnet.regressor.params("tnet.reg"))
        out.update(self.head.params("cls"))
        return out

    def refresh(self):
        for enc in self.encoders().values():
            enc.refresh()

    def copy(self):
        return GPEClassifier(self.encoder.copy(), None if self.tnet is None else self.tnet.copy(), self.head.copy())

    @property
    def n_params(self):
        n = self.encoder.n_params + self.head.n_params
        if self.tnet is not None:
            n += self.tnet.n_params
        return n
