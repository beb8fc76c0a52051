import math

import numpy as np
import pytest

from conftest import monte_carlo_fisher, random_encoder, random_tri
from gpe.encoder import GaussianEncoder
from gpe.errors import ConfigError
from gpe.linalg import chol_to_precision, precision_to_covariance
from gpe.optim import (ADAM_LRS, NG_LRS, AdamState, OptimConfig, Optimizer, fisher_chol_direction, fisher_matrix,
                       mahalanobis_direction, step_adam, step_ng_fisher, step_ng_mahalanobis)


def test_adam_first_step_sign(rng):
    p = rng.normal(size=20)
    g = rng.uniform(10, 100, 20) * rng.choice([-1, 1], 20)
    before = p.copy()
    step_adam({"w": p}, {"w": g}, AdamState(), {"w": 1e-3})
    assert np.abs((p - before) + 1e-3 * np.sign(g)).max() <= 1e-12


def test_adam_zero_gradient(rng):
    p = rng.normal(size=5)
    before = p.copy()
    st = AdamState()
    for _ in range(10):
        step_adam({"w": p}, {"w": np.zeros(5)}, st, {"w": 0.1})
    assert np.array_equal(p, before)


def test_adam_hand_trace():
    # three steps on a scalar written out longhand
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -0.2, 0.1]
    x, m, v = 1.0, 0.0, 0.0
    ref = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(x)
    # step 1 is exactly -lr*sign(g) up to eps
    assert abs(ref[0] - 0.9) <= 1e-8
    p = np.array([1.0])
    st = AdamState()
    for g, r in zip(grads, ref):
        step_adam({"w": p}, {"w": np.array([g])}, st, {"w": lr})
        assert abs(p[0] - r) <= 1e-12


def test_adam_decoupled_weight_decay():
    p = np.array([2.0])
    step_adam({"w": p}, {"w": np.array([0.0])}, AdamState(), {"w": 0.1}, weight_decay=0.5)
    assert abs(p[0] - (2.0 - 0.1 * 0.5 * 2.0)) <= 1e-15


def _enc(chol, mean=(0.0, 0.0, 0.0)):
    return GaussianEncoder([mean], [chol], [[1.0]], [0.0])


def test_mahalanobis_identity_is_sgd(rng):
    e = _enc([1, 0, 1, 0, 0, 1])
    g = rng.normal(size=(1, 3))
    before = e.means.copy()
    step_ng_mahalanobis(e, g, np.zeros((1, 6)), 0.3, 0.0)
    assert np.allclose(e.means, before - 0.3 * g, rtol=0, atol=1e-15)


def test_mahalanobis_closed_form():
    e = _enc([2, 0, 1, 0, 0, 1])
    step_ng_mahalanobis(e, np.ones((1, 3)), np.zeros((1, 6)), 1.0, 0.0)
    assert np.allclose(e.means[0], [-0.25, -1, -1], rtol=0, atol=1e-15)


def test_mahalanobis_matvec_oracle(rng):
    chol = random_tri(rng, 10)
    g = rng.normal(size=(10, 3))
    got = mahalanobis_direction(chol, g)
    for i in range(10):
        s = np.linalg.inv(chol_to_precision(chol[i]))
        ref = [sum(s[a, b] * g[i, b] for b in range(3)) for a in range(3)]
        assert np.abs(got[i] - ref).max() <= 1e-12 * max(1, np.abs(ref).max())


def test_ng_linearity(rng):
    chol = random_tri(rng, 4)
    g = rng.normal(size=(4, 3))
    gc = rng.normal(size=(4, 6))
    for c in (-2.0, 0.5, 3.0):
        assert np.allclose(mahalanobis_direction(chol, c * g), c * mahalanobis_direction(chol, g), rtol=1e-14, atol=0)
        assert np.allclose(fisher_chol_direction(chol, c * gc), c * fisher_chol_direction(chol, gc), rtol=1e-12,
                           atol=1e-14)


def test_fisher_structure(rng):
    chol = random_tri(rng, 5)
    f = fisher_matrix(np.zeros((5, 3)), chol)
    assert f.shape == (5, 9, 9)
    assert np.array_equal(f[:, :3, :3], chol_to_precision(chol))
    assert np.all(f[:, :3, 3:] == 0) and np.all(f[:, 3:, :3] == 0)
    assert np.allclose(f, np.swapaxes(f, 1, 2), rtol=0, atol=1e-14)
    assert np.all(np.linalg.eigvalsh(f) > 0)
    assert fisher_matrix(np.zeros(3), chol[0]).shape == (9, 9)


def test_fisher_trace_form_direct(rng):
    # element-by-element evaluation of 0.5 tr(S dP_i S dP_j)
    chol = random_tri(rng)
    f = fisher_matrix(np.zeros(3), chol)
    l = np.zeros((3, 3))
    l[np.tril_indices(3)] = chol
    s = precision_to_covariance(chol)
    slots = list(zip(*np.tril_indices(3)))
    for i, (a, b) in enumerate(slots):
        for j, (c, d) in enumerate(slots):
            ea, ec = np.zeros((3, 3)), np.zeros((3, 3))
            ea[a, b] = 1
            ec[c, d] = 1
            ref = 0.5 * np.trace(s @ (ea @ l.T + l @ ea.T) @ s @ (ec @ l.T + l @ ec.T))
            assert abs(f[3 + i, 3 + j] - ref) <= 1e-12 * max(1, abs(ref))


def test_fisher_identity_monte_carlo():
    rng = np.random.default_rng(7)
    chol = np.array([1.0, 0, 1, 0, 0, 1])
    mc = monte_carlo_fisher(np.zeros(3), chol, 1_000_000, rng)
    f = fisher_matrix(np.zeros(3), chol)
    scale = np.abs(f[3:, 3:]).max()
    for i in range(3, 9):
        for j in range(3, 9):
            if abs(f[i, j]) > 1e-12:
                assert abs(mc[i, j] - f[i, j]) <= 0.05 * abs(f[i, j])
            else:
                assert abs(mc[i, j]) <= 0.05 * scale


def test_fisher_random_monte_carlo():
    rng = np.random.default_rng(8)
    for _ in range(2):
        chol = random_tri(rng)
        mean = rng.normal(size=3)
        mc = monte_carlo_fisher(mean, chol, 1_000_000, rng)
        f = fisher_matrix(mean, chol)
        assert np.linalg.norm(mc - f) <= 0.05 * np.linalg.norm(f)


def test_fisher_step_residual_and_mean_block(rng):
    for _ in range(10):
        e = random_encoder(rng, 3, 2)
        m = e.copy()
        gm, gc = rng.normal(size=(3, 3)), rng.normal(size=(3, 6))
        f = fisher_matrix(e.means, e.chol)
        before_mu, before_l = e.means.copy(), e.chol.copy()
        step_ng_fisher(e, gm, gc, 0.01)
        step_ng_mahalanobis(m, gm, gc, 0.01, 0.0)
        assert np.array_equal(e.means, m.means)
        delta = np.concatenate([e.means - before_mu, e.chol - before_l], axis=1) / -0.01
        resid = np.einsum("gij,gj->gi", f, delta) - np.concatenate([gm, gc], axis=1)
        assert np.abs(resid).max() <= 1e-8


def test_fisher_zero_gradient(rng):
    e = random_encoder(rng, 3, 2)
    before = e.copy()
    step_ng_fisher(e, np.zeros((3, 3)), np.zeros((3, 6)), 0.1)
    assert np.array_equal(e.means, before.means) and np.array_equal(e.chol, before.chol)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(method="sgd")
    with pytest.raises(ConfigError):
        OptimConfig(lrs={"mean": 1.0})
    with pytest.raises(ConfigError):
        OptimConfig(lrs={**ADAM_LRS, "mean": -1.0})
    with pytest.raises(ConfigError):
        OptimConfig(finetune_lr_divisor=0.5)
    assert OptimConfig.for_method("ng_mahalanobis").lrs == NG_LRS


def _grads_like(params, rng):
    return {k: rng.normal(size=v.shape) for k, v in params.items()}


def test_optimizer_routing_ng(rng):
    from conftest import random_classifier
    clf = random_classifier(rng)
    params = clf.params()
    grads = _grads_like(params, rng)
    before = {k: v.copy() for k, v in params.items()}
    opt = Optimizer(OptimConfig.for_method("ng_mahalanobis"), clf.encoders())
    opt.step(params, grads)
    # means follow the preconditioned SGD rule; mixer and MLPs go through Adam
    for p in ("enc", "tnet.enc"):
        ref = before[f"{p}.means"] - NG_LRS["mean"] * mahalanobis_direction(before[f"{p}.chol"], grads[f"{p}.means"])
        assert np.allclose(params[f"{p}.means"], ref, rtol=0, atol=1e-15)
        assert set(opt.state.m) >= {f"{p}.alpha", f"{p}.bias"}
        assert f"{p}.means" not in opt.state.m and f"{p}.chol" not in opt.state.m
    assert np.allclose(params["cls.0.weight"], before["cls.0.weight"] - NG_LRS["mlp"] * np.sign(grads["cls.0.weight"]),
                       rtol=0, atol=1e-9)


def test_optimizer_lr_scale_and_chol_groups(rng):
    e = random_encoder(rng, 2, 3)
    params = e.params("enc")
    grads = {k: np.full(v.shape, 5.0) for k, v in params.items()}
    before = {k: v.copy() for k, v in params.items()}
    lrs = {"mean": 1e-2, "chol_diag": 1e-3, "chol_lower": 1e-4, "mixer": 1e-5, "mlp": 1.0}
    Optimizer(OptimConfig(lrs=lrs), {"enc": e}, lr_scale={"enc": 0.01}).step(params, grads)
    d = {k: before[k] - params[k] for k in params}
    assert np.allclose(d["enc.means"], 1e-4, rtol=1e-6)
    assert np.allclose(d["enc.chol"][:, [0, 2, 5]], 1e-5, rtol=1e-6)
    assert np.allclose(d["enc.chol"][:, [1, 3, 4]], 1e-6, rtol=1e-6)
    assert np.allclose(d["enc.alpha"], 1e-7, rtol=1e-6)
    assert np.array_equal(e.precision, chol_to_precision(e.chol))
