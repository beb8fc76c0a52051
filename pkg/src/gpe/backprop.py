"""Analytic gradients for the Gaussian encoder stack and the PointNet teacher.

Gradients are returned as plain ``dict[str, ndarray]`` keyed like the
``params()`` dictionaries of the models they belong to.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .encoder import GPEClassifier, GaussianEncoder, TNet, column_argmax, mahalanobis_sq, mix, offsets, transformed_gaussians
from .errors import NonFinite, ShapeMismatch
from .linalg import DIAG_SLOTS, OFFDIAG_SLOTS, TRI_COLS, TRI_ROWS
from .mlp import MLP
from .pointnet import PointNetModel

FREEZE_FLAGS = ("means", "lower_tri", "diag")


def cross_entropy(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    if not np.isfinite(logits).all():
        raise NonFinite("logits are not finite")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    b = len(labels)
    loss = float(np.mean(lse - shifted[np.arange(b), labels]))
    dlogits = np.exp(shifted - lse[:, None])
    dlogits[np.arange(b), labels] -= 1.0
    return loss, dlogits / b


def chol_grad(dprec, chol):
    """Pull a gradient w.r.t. ``P = L L^T`` back to packed ``L`` entries."""
    lower = np.zeros(chol.shape[:-1] + (3, 3))
    lower[..., TRI_ROWS, TRI_COLS] = chol
    full = (dprec + np.swapaxes(dprec, -1, -2)) @ lower
    return full[..., TRI_ROWS, TRI_COLS]


def gaussian_backward(d, phi, precision, dphi):
    """Gradients w.r.t. precision and mean given ``dL/dphi``.

    ``d`` holds offsets ``x - mu`` of shape ``(N, G, 3)``.
    """
    dq = -0.5 * phi * dphi
    dprec = np.einsum("ng,ngi,ngj->gij", dq, d, d)
    dmeans = -2.0 * np.einsum("gij,gj->gi", precision, np.einsum("ng,ngi->gi", dq, d))
    return dprec, dmeans


def _pooled_encoder_forward(means, precision, alpha, bias, points):
    d = offsets(means, points)
    phi = np.exp(-0.5 * mahalanobis_sq(precision, d))
    act = mix(phi, alpha)
    am = column_argmax(act)
    values = act[am, np.arange(act.shape[1])] + bias
    return values, (d, phi, am)


def _pooled_encoder_backward(cache, alpha, precision, dvalues):
    """Backward through mixer and max-pool; only argmax points carry gradient."""
    d, phi, am = cache
    dalpha = phi[am].T * dvalues[None, :]
    dbias = dvalues.copy()
    rows, inverse = np.unique(am, return_inverse=True)
    dphi = np.zeros((len(rows), alpha.shape[0]))
    np.add.at(dphi, inverse, dvalues[:, None] * alpha.T)
    dprec, dmeans = gaussian_backward(d[rows], phi[rows], precision, dphi)
    return dalpha, dbias, dprec, dmeans


def _check_finite(loss, grads):
    if not np.isfinite(loss):
        raise NonFinite("loss is not finite")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFinite(f"gradient {name} is not finite")


def apply_freeze(grads, freeze, prefixes=("enc", "tnet.enc")):
    """Zero the frozen Gaussian parameter groups in place."""
    freeze = set(freeze or ())
    unknown = freeze - set(FREEZE_FLAGS)
    if unknown:
        raise ValueError(f"unknown freeze flags {sorted(unknown)}")
    for p in prefixes:
        if f"{p}.means" not in grads:
            continue
        if "means" in freeze:
            grads[f"{p}.means"][:] = 0.0
        if "lower_tri" in freeze:
            grads[f"{p}.chol"][:, OFFDIAG_SLOTS] = 0.0
        if "diag" in freeze:
            grads[f"{p}.chol"][:, DIAG_SLOTS] = 0.0
    return grads


def backward_classify(model: GaussianEncoder, tnet: TNet | None, classifier: MLP, points, label, freeze=None):
    """Cross-entropy loss of one cloud and gradients of every parameter."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    grads = {}
    if tnet is not None:
        te = tnet.encoder
        tvals, tcache = _pooled_encoder_forward(te.means, te.precision, te.alpha, te.bias, points)
        r, r_in = tnet.regressor.forward(tvals[None, :])
        t = np.eye(3) + r[0].reshape(3, 3)
        means, prec, t_inv = transformed_gaussians(model.means, model.precision, t)
    else:
        means, prec = model.means, model.precision
    values, cache = _pooled_encoder_forward(means, prec, model.alpha, model.bias, points)
    logits, c_in = classifier.forward(values[None, :])
    loss, dlogits = cross_entropy(logits, [label])

    dvalues = classifier.backward(c_in, logits, dlogits, "cls", grads)[0]
    dalpha, dbias, dprec_t, dmeans_t = _pooled_encoder_backward(cache, model.alpha, prec, dvalues)
    grads["enc.alpha"], grads["enc.bias"] = dalpha, dbias
    if tnet is None:
        grads["enc.means"] = dmeans_t
        grads["enc.chol"] = chol_grad(dprec_t, model.chol)
    else:
        # means' = T^-1 mu, P' = T^T P T
        grads["enc.means"] = dmeans_t @ t_inv
        dprec = t @ dprec_t @ t.T
        grads["enc.chol"] = chol_grad(dprec, model.chol)
        dt_inv = dmeans_t.T @ model.means
        dt = -t_inv.T @ dt_inv @ t_inv.T
        dt += 2.0 * np.einsum("gab,bc,gcd->ad", model.precision, t, dprec_t)
        dtvals = tnet.regressor.backward(r_in, r, dt.reshape(1, 9), "tnet.reg", grads)[0]
        tdalpha, tdbias, tdprec, tdmeans = _pooled_encoder_backward(tcache, te.alpha, te.precision, dtvals)
        grads["tnet.enc.alpha"], grads["tnet.enc.bias"] = tdalpha, tdbias
        grads["tnet.enc.means"] = tdmeans
        grads["tnet.enc.chol"] = chol_grad(tdprec, te.chol)
    apply_freeze(grads, freeze)
    _check_finite(loss, grads)
    return loss, grads


def classifier_batch_grads(clf: GPEClassifier, clouds, labels, freeze=None):
    """Mean loss and gradients over a batch of clouds (fixed summation order)."""
    total, acc = 0.0, None
    for pts, y in zip(clouds, labels):
        loss, g = backward_classify(clf.encoder, clf.tnet, clf.head, pts, int(y), freeze)
        total += loss
        if acc is None:
            acc = g
        else:
            for k in acc:
                acc[k] += g[k]
    n = len(labels)
    return total / n, {k: v / n for k, v in acc.items()}


def distill_loss(student: GaussianEncoder, teacher_embed, points, prefix="enc", freeze=None):
    """Mean absolute error between student activations and teacher embeddings.

    The subgradient of ``|.|`` at zero is taken as zero.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    teacher_embed = np.asarray(teacher_embed, dtype=float)
    if teacher_embed.shape != (len(points), student.n_volumes):
        raise ShapeMismatch(f"teacher embeddings {teacher_embed.shape} vs expected {(len(points), student.n_volumes)}")
    d = offsets(student.means, points)
    phi = np.exp(-0.5 * mahalanobis_sq(student.precision, d))
    diff = mix(phi, student.alpha) + student.bias - teacher_embed
    loss = float(np.mean(np.abs(diff)))
    dl = np.sign(diff) / diff.size
    dphi = dl @ student.alpha.T
    dprec, dmeans = gaussian_backward(d, phi, student.precision, dphi)
    grads = {
        f"{prefix}.means": dmeans,
        f"{prefix}.chol": chol_grad(dprec, student.chol),
        f"{prefix}.alpha": phi.T @ dl,
        f"{prefix}.bias": dl.sum(axis=0),
    }
    apply_freeze(grads, freeze, prefixes=(prefix,))
    _check_finite(loss, grads)
    return loss, grads


# ------------------------------------------------------------- teacher

def _pooled_layer_backward(layer, x_in, am, dpool, prefix, index, grads):
    """Backward of the last per-point layer when only its max-pool is used.

    ``x_in`` is ``(B, N, in)``; gradient reaches one point per (cloud, unit).
    """
    b, n, _ = x_in.shape
    out = dpool.shape[1]
    rows = (np.arange(b)[:, None] * n + am).ravel()
    flat = x_in.reshape(b * n, -1)
    grads[f"{prefix}.{index}.weight"] = np.einsum("bk,bki->ki", dpool, flat[rows].reshape(b, out, -1))
    grads[f"{prefix}.{index}.bias"] = dpool.sum(axis=0)
    cols = np.tile(np.arange(out), b)
    scatter = sp.csr_matrix((dpool.ravel(), (rows, cols)), shape=(b * n, out))
    return np.asarray(scatter @ layer.weight)


def pointnet_batch_grads(model: PointNetModel, clouds, labels):
    """Mean cross-entropy over ``(B, N, 3)`` clouds with gradients; also returns logits."""
    x = np.asarray(clouds, dtype=float)
    b, n, _ = x.shape
    grads = {}
    th, th_in = model.tnet_mlp.forward(x.reshape(-1, 3))
    th = th.reshape(b, n, -1)
    tam = np.stack([column_argmax(h) for h in th])
    tpool = np.take_along_axis(th, tam[:, None, :], axis=1)[:, 0, :]
    r, r_in = model.tnet_reg.forward(tpool)
    t = np.eye(3) + r.reshape(b, 3, 3)
    xt = np.einsum("bij,bnj->bni", t, x)
    e, e_in = model.encoder.forward(xt.reshape(-1, 3))
    e = e.reshape(b, n, -1)
    eam = np.stack([column_argmax(h) for h in e])
    epool = np.take_along_axis(e, eam[:, None, :], axis=1)[:, 0, :]
    logits, c_in = model.classifier.forward(epool)
    loss, dlogits = cross_entropy(logits, labels)

    dpool = model.classifier.backward(c_in, logits, dlogits, "cls", grads)
    last = len(model.encoder.layers) - 1
    dh = _pooled_layer_backward(model.encoder.layers[last], e_in[-1].reshape(b, n, -1), eam, dpool, "enc", last, grads)
    dxt = model.encoder.backward(e_in[:-1], e_in[-1], dh, "enc", grads) if last > 0 else dh
    dt = np.einsum("bni,bnj->bij", dxt.reshape(b, n, 3), x)
    dtpool = model.tnet_reg.backward(r_in, r, dt.reshape(b, 9), "tnet.reg", grads)
    dtpool = dtpool * (tpool > 0)
    last = len(model.tnet_mlp.layers) - 1
    dh = _pooled_layer_backward(model.tnet_mlp.layers[last], th_in[-1].reshape(b, n, -1), tam, dtpool, "tnet.mlp", last, grads)
    if last > 0:
        model.tnet_mlp.backward(th_in[:-1], th_in[-1], dh, "tnet.mlp", grads)
    _check_finite(loss, grads)
    return loss, grads, logits
