"""Reference PointNet (input T-Net, no feature transform) used as teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import MLP

TNET_POINT_WIDTHS = (3, 64, 128, 1024)
TNET_REGRESSOR_WIDTHS = (1024, 512, 256, 9)
ENCODER_WIDTHS = (3, 64, 128, 1024)
CLASSIFIER_HIDDEN = (512, 256)


@dataclass
class PointNetModel:
    tnet_mlp: MLP  # per-point, ReLU on every layer
    tnet_reg: MLP  # pooled feature -> 9, identity residual
    encoder: MLP  # per-point, last layer linear
    classifier: MLP

    @classmethod
    def create(cls, n_classes, rng, tnet_widths=TNET_POINT_WIDTHS, reg_widths=TNET_REGRESSOR_WIDTHS,
               encoder_widths=ENCODER_WIDTHS, hidden=CLASSIFIER_HIDDEN):
        return cls(
            MLP.create(tnet_widths, rng, final_activation="relu"),
            MLP.create(reg_widths, rng, zero_last=True),
            MLP.create(encoder_widths, rng),
            MLP.create((encoder_widths[-1],) + tuple(hidden) + (n_classes,), rng),
        )

    @property
    def embed_dim(self):
        return self.encoder.widths[-1]

    @property
    def n_classes(self):
        return self.classifier.widths[-1]

    @property
    def n_params(self):
        return sum(m.n_params for m in self.stacks())

    def stacks(self):
        return (self.tnet_mlp, self.tnet_reg, self.encoder, self.classifier)

    def params(self):
        out = {}
        for name, stack in zip(("tnet.mlp", "tnet.reg", "enc", "cls"), self.stacks()):
            out.update(stack.params(name))
        return out

    def copy(self):
        return PointNetModel(*(m.copy() for m in self.stacks()))


def _canonical(points):
    """Lexicographic order of the points.

    Per-point layers run on the sorted copy so that any permutation of the
    input feeds BLAS the same matrix, which makes outputs bit-identical.
    """
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _per_point(stack, points):
    order = _canonical(points)
    out = np.empty((len(points), stack.widths[-1]))
    out[order] = stack(points[order])
    return out


def tnet_embed(model: PointNetModel, points):
    """Per-point T-Net features before pooling, ``(N, 1024)``."""
    return _per_point(model.tnet_mlp, np.asarray(points, dtype=float).reshape(-1, 3))


def tnet_transform(model: PointNetModel, points):
    feat = tnet_embed(model, points).max(axis=0)
    return np.eye(3) + model.tnet_reg(feat[None, :])[0].reshape(3, 3)


def pointnet_embed(model: PointNetModel, points):
    """Per-point embeddings of the transformed points, before max-pooling."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    order = _canonical(points)
    ordered = points[order]
    t = np.eye(3) + model.tnet_reg(model.tnet_mlp(ordered).max(axis=0)[None, :])[0].reshape(3, 3)
    out = np.empty((len(points), model.embed_dim))
    out[order] = model.encoder(ordered @ t.T)
    return out


def pointnet_forward(model: PointNetModel, points):
    feat = pointnet_embed(model, points).max(axis=0)
    return model.classifier(feat[None, :])[0]


def predict(model: PointNetModel, clouds):
    return np.array([int(np.argmax(pointnet_forward(model, p))) for p in clouds])
