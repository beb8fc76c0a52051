"""Key-value run configuration.

One ``key = value`` per line; ``#`` starts a comment. Values are parsed as
int, float, bool (``true``/``false``), comma lists, or left as strings.
Unknown keys are rejected so typos surface early.
"""

from __future__ import annotations

from .errors import ConfigError
from .filtering import FilterConfig
from .optim import ADAM_LRS, DISTILL_LRS, NG_LRS, OptimConfig
from .train import DistillConfig, TrainConfig

DEFAULTS = {
    # data
    "data.seed": 0,
    "data.n_per_class": 125,
    "data.n_test_per_class": 50,
    "data.n_points": 512,
    "data.val_fraction": 0.25,
    # model
    "model.n_gaussians": 32,
    "model.n_volumes": 1024,
    "model.tnet": True,
    "model.tnet_gaussians": 32,
    "model.init_scale": 2.0,
    "model.head_hidden": [512, 256],
    # teacher training
    "train.epochs": 8,
    "train.batch_size": 16,
    "train.lr": 1e-3,
    "train.n_points": 256,
    "train.augment": "none",
    "train.weight_decay": 0.0,
    "train.seed": 0,
    # end-to-end optimisation
    "optim.method": "adam",
    "optim.lr.mean": None,
    "optim.lr.chol_diag": None,
    "optim.lr.chol_lower": None,
    "optim.lr.mixer": None,
    "optim.lr.mlp": None,
    "optim.finetune_lr_divisor": 100.0,
    "optim.freeze": [],
    "optim.weight_decay": 0.0,
    "optim.epochs": 10,
    "optim.batch_size": 16,
    "optim.n_points": 256,
    # distillation
    "distill.stages": [1, 2, 3],
    "distill.samples_per_batch": 1024,
    "distill.batches": 2000,
    "distill.heldout_samples": 2048,
    "distill.eval_every": 100,
    "distill.lr.mean": 3e-2,
    "distill.lr.chol_diag": 1e-2,
    "distill.lr.chol_lower": 2e-3,
    "distill.lr.mixer": 1e-2,
    "distill.lr.mlp": 1e-3,
    "distill.finetune_epochs": 2,
    "distill.finetune_batch_size": 16,
    "distill.finetune_n_points": 256,
    "distill.patch": False,
    "distill.n_centers": 32,
    "distill.k": 32,
    # filtering
    "filter.method": "none",
    "filter.t": 0.1,
    "filter.d_voxel": 8,
    "filter.domain_slack": 1.0,
    "filter.fallback": True,
    "filter.tnet": True,
    # bench
    "bench.warmup": 3,
    "bench.iters": 20,
    "bench.threads": 1,
    "bench.n_points": 2048,
}


def parse_value(text):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in s:
        return [parse_value(p) for p in s.split(",") if p.strip()]
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config(text, base=None):
    cfg = dict(DEFAULTS if base is None else base)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        set_key(cfg, key, value, lineno)
    return cfg


def set_key(cfg, key, value, lineno=None):
    if key not in DEFAULTS:
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}unknown config key {key!r}")
    v = parse_value(value) if isinstance(value, str) else value
    if isinstance(DEFAULTS[key], list) and not isinstance(v, list):
        v = [] if v is None else [v]
    cfg[key] = v


def load_config(path=None, overrides=()):
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                cfg = parse_config(f.read(), cfg)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v)
    return cfg


def _lrs(cfg, prefix, base):
    out = dict(base)
    for k in out:
        v = cfg.get(f"{prefix}.lr.{k}")
        if v is not None:
            out[k] = float(v)
    return out


def optim_config(cfg):
    method = cfg["optim.method"]
    base = {"adam": ADAM_LRS, "ng_mahalanobis": NG_LRS, "ng_fisher": NG_LRS}.get(method)
    if base is None:
        raise ConfigError(f"unknown optim.method {method!r}")
    return OptimConfig(method=method, lrs=_lrs(cfg, "optim", base),
                       finetune_lr_divisor=float(cfg["optim.finetune_lr_divisor"]),
                       freeze=tuple(cfg["optim.freeze"]), weight_decay=float(cfg["optim.weight_decay"]))


def e2e_train_config(cfg):
    return TrainConfig(epochs=int(cfg["optim.epochs"]), batch_size=int(cfg["optim.batch_size"]),
                       n_points=cfg["optim.n_points"])


def teacher_train_config(cfg):
    return TrainConfig(epochs=int(cfg["train.epochs"]), batch_size=int(cfg["train.batch_size"]),
                       lr=float(cfg["train.lr"]), n_points=cfg["train.n_points"], augment=cfg["train.augment"],
                       weight_decay=float(cfg["train.weight_decay"]))


def distill_config(cfg):
    return DistillConfig(
        stages=tuple(int(s) for s in cfg["distill.stages"]),
        samples_per_batch=int(cfg["distill.samples_per_batch"]),
        batches=int(cfg["distill.batches"]),
        heldout_samples=int(cfg["distill.heldout_samples"]),
        eval_every=int(cfg["distill.eval_every"]),
        lrs=_lrs(cfg, "distill", DISTILL_LRS),
        finetune=TrainConfig(epochs=int(cfg["distill.finetune_epochs"]),
                             batch_size=int(cfg["distill.finetune_batch_size"]),
                             n_points=cfg["distill.finetune_n_points"]),
        patch=bool(cfg["distill.patch"]),
        n_centers=int(cfg["distill.n_centers"]),
        k=int(cfg["distill.k"]),
    )


def filter_config(cfg):
    t = float(cfg["filter.t"])
    return FilterConfig(method=cfg["filter.method"], t_distance=t, t_bbox=t, t_voxel=t,
                        d_voxel=int(cfg["filter.d_voxel"]), domain_slack=float(cfg["filter.domain_slack"]),
                        fallback=bool(cfg["filter.fallback"]), filter_tnet=bool(cfg["filter.tnet"]))
