"""Adam, natural-gradient SGD for Gaussian parameters, and group routing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NearSingular
from .linalg import DIAG_SLOTS, OFFDIAG_SLOTS, TRI_COLS, TRI_ROWS, chol_to_precision, precision_to_covariance, tri_to_mat

METHODS = ("adam", "ng_mahalanobis", "ng_fisher")

DISTILL_LRS = {"mean": 1.6e-3, "chol_diag": 5e-4, "chol_lower": 1e-4, "mixer": 1e-4, "mlp": 1e-4}
NG_LRS = {"mean": 5e-3, "chol_diag": 5e-3, "chol_lower": 5e-3, "mixer": 1e-3, "mlp": 1e-3}
ADAM_LRS = {"mean": 1e-3, "chol_diag": 1e-3, "chol_lower": 1e-3, "mixer": 1e-3, "mlp": 1e-3}


@dataclass
class OptimConfig:
    method: str = "adam"
    lrs: dict = field(default_factory=lambda: dict(ADAM_LRS))
    finetune_lr_divisor: float = 100.0
    freeze: tuple = ()
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown optimizer {self.method!r}; choose from {METHODS}")
        missing = set(DISTILL_LRS) - set(self.lrs)
        if missing:
            raise ConfigError(f"missing learning rates for {sorted(missing)}")
        if any(v < 0 for v in self.lrs.values()):
            raise ConfigError("learning rates must be non-negative")
        if self.finetune_lr_divisor < 1:
            raise ConfigError("finetune_lr_divisor must be >= 1")

    @classmethod
    def for_method(cls, method, **kw):
        lrs = {"adam": ADAM_LRS, "ng_mahalanobis": NG_LRS, "ng_fisher": NG_LRS}[method]
        return cls(method=method, lrs=dict(lrs), **kw)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)


def step_adam(params, grads, state: AdamState, lrs, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW step, in place, over the names present in ``lrs``.

    ``lrs`` maps parameter name to a scalar or an array broadcastable to it.
    """
    b1, b2 = betas
    for name, lr in lrs.items():
        p, g = params[name], grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.step[name] = 0
        state.step[name] += 1
        t = state.step[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def mahalanobis_direction(chol, dmeans):
    """``Sigma_g @ grad_mu`` for every Gaussian."""
    return np.einsum("gij,gj->gi", precision_to_covariance(chol), dmeans)


def step_ng_mahalanobis(encoder, dmeans, dchol, lr_mean, lr_chol):
    """Mean step preconditioned by the covariance, plain SGD on the Cholesky entries."""
    encoder.means -= lr_mean * mahalanobis_direction(encoder.chol, dmeans)
    encoder.chol -= lr_chol * dchol
    encoder.refresh()


def _dprec_basis(chol):
    """``dP/dl_ab = E_ab L^T + L E_ab^T`` for the six packed entries: ``(G, 6, 3, 3)``."""
    lower = tri_to_mat(chol)
    g = len(chol)
    basis = np.zeros((g, 6, 3, 3))
    for s, (a, b) in enumerate(zip(TRI_ROWS, TRI_COLS)):
        # (E_ab L^T)_ij = delta_ia L_jb
        basis[:, s, a, :] += lower[:, :, b]
        basis[:, s, :, a] += lower[:, :, b]
    return basis


def fisher_matrix(mean, chol):
    """Fisher information of ``N(mu, (L L^T)^-1)`` in ``(mu, packed L)`` coordinates.

    Accepts one Gaussian (``(3,)``, ``(6,)``) or a bank (``(G, 3)``, ``(G, 6)``)
    and returns ``(9, 9)`` or ``(G, 9, 9)``.
    """
    single = np.ndim(chol) == 1
    chol = np.atleast_2d(np.asarray(chol, dtype=float))
    cov = precision_to_covariance(chol)
    prec = chol_to_precision(chol)
    basis = _dprec_basis(chol)
    # 0.5 tr(S dP_i S dP_j)
    sd = np.einsum("gab,gsbc->gsac", cov, basis)
    chol_block = 0.5 * np.einsum("gsab,gtba->gst", sd, sd)
    f = np.zeros((len(chol), 9, 9))
    f[:, :3, :3] = prec
    f[:, 3:, 3:] = 0.5 * (chol_block + np.swapaxes(chol_block, 1, 2))
    return f[0] if single else f


def fisher_chol_direction(chol, dchol, ridge=1e-8, max_cond=1e10):
    """Solve ``F_chol x = grad`` per Gaussian (ridge added when ill-conditioned)."""
    blocks = fisher_matrix(np.zeros((len(chol), 3)), chol)[:, 3:, 3:]
    out = np.empty_like(dchol)
    for g, block in enumerate(blocks):
        if np.linalg.cond(block) > max_cond:
            block = block + ridge * np.eye(6)
        try:
            out[g] = np.linalg.solve(block, dchol[g])
        except np.linalg.LinAlgError as exc:
            raise NearSingular(f"Fisher block of Gaussian {g} is singular") from exc
        if not np.all(np.isfinite(out[g])):
            raise NearSingular(f"Fisher block of Gaussian {g} is singular")
    return out


def step_ng_fisher(encoder, dmeans, dchol, lr):
    """Joint (mean, Cholesky) step preconditioned by the inverse Fisher matrix.

    The Fisher matrix is block diagonal, so the mean part is the Mahalanobis step.
    """
    mean_dir = mahalanobis_direction(encoder.chol, dmeans)
    chol_dir = fisher_chol_direction(encoder.chol, dchol)
    encoder.means -= lr * mean_dir
    encoder.chol -= lr * chol_dir
    encoder.refresh()


GAUSSIAN_LEAVES = {"means": "mean", "chol": "chol", "alpha": "mixer", "bias": "mixer"}


def _group(name):
    prefix, leaf = name.rsplit(".", 1)
    if prefix.endswith("enc") and leaf in GAUSSIAN_LEAVES:
        return GAUSSIAN_LEAVES[leaf]
    return "mlp"


def _encoder_prefix(name):
    return name.rsplit(".", 1)[0]


class Optimizer:
    """Routes parameters to Adam or natural-gradient SGD by group.

    ``ng_*`` methods handle Gaussian means and Cholesky factors with SGD
    (preconditioned) and everything else with AdamW.
    """

    def __init__(self, config: OptimConfig, encoders, lr_scale=None):
        self.config = config
        self.encoders = encoders
        self.state = AdamState()
        self.lr_scale = dict(lr_scale or {})

    def _lr(self, name):
        group = _group(name)
        scale = self.lr_scale.get(_encoder_prefix(name), 1.0) if group != "mlp" else self.lr_scale.get("mlp", 1.0)
        lrs = self.config.lrs
        if group == "chol":
            lr = np.empty(6)
            lr[DIAG_SLOTS] = lrs["chol_diag"]
            lr[OFFDIAG_SLOTS] = lrs["chol_lower"]
            return lr * scale
        return lrs[group] * scale

    def step(self, params, grads):
        cfg = self.config
        adam_lrs = {}
        for name in grads:
            group = _group(name)
            if cfg.method != "adam" and group in ("mean", "chol"):
                continue
            adam_lrs[name] = self._lr(name)
        step_adam(params, grads, self.state, adam_lrs, cfg.betas, cfg.eps, cfg.weight_decay)
        if cfg.method != "adam":
            for prefix, enc in self.encoders.items():
                if f"{prefix}.means" not in grads:
                    continue
                lr_mean = self._lr(f"{prefix}.means")
                lr_chol = self._lr(f"{prefix}.chol")
                dmeans, dchol = grads[f"{prefix}.means"], grads[f"{prefix}.chol"]
                if cfg.method == "ng_mahalanobis":
                    step_ng_mahalanobis(enc, dmeans, dchol, lr_mean, lr_chol)
                else:
                    # the Fisher step uses one rate for the joint (mean, L) vector
                    step_ng_fisher(enc, dmeans, dchol, lr_mean)
        for enc in self.encoders.values():
            enc.refresh()
