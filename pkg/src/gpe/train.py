"""Training loops: teacher PointNet, end-to-end 3DGPE, and distillation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .backprop import classifier_batch_grads, cross_entropy, distill_loss, pointnet_batch_grads
from .data import Dataset, augment, resample, sample_patches
from .encoder import GPEClassifier, GaussianEncoder, TNet
from .errors import ConfigError, NonFinite
from .mlp import MLP
from .optim import DISTILL_LRS, AdamState, OptimConfig, Optimizer, step_adam
from .pointnet import PointNetModel, pointnet_forward, tnet_embed, tnet_transform

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    n_points: int | None = None  # per-epoch random subset of each training cloud
    augment: str = "none"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class DistillConfig:
    stages: tuple = (1, 2, 3)
    samples_per_batch: int = 4096
    batches: int = 2000
    heldout_samples: int = 4096
    eval_every: int = 100
    lrs: dict = field(default_factory=lambda: dict(DISTILL_LRS))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2))
    patch: bool = False
    n_centers: int = 32
    k: int = 32

    def __post_init__(self):
        if self.samples_per_batch < 1 or self.heldout_samples < 1:
            raise ConfigError("samples_per_batch must be >= 1")
        if self.batches < 0:
            raise ConfigError("batches must be >= 0")
        if not set(self.stages) <= {1, 2, 3}:
            raise ConfigError(f"unknown stages {self.stages}")


# ------------------------------------------------------------- metrics

def accuracy_metrics(pred, labels, n_classes):
    """Overall accuracy and class-averaged accuracy (classes present only)."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        return {"OA": float("nan"), "mAcc": float("nan")}
    oa = float(np.mean(pred == labels))
    per_class = [np.mean(pred[labels == c] == c) for c in range(n_classes) if np.any(labels == c)]
    return {"OA": oa, "mAcc": float(np.mean(per_class))}


def evaluate_logits(logits, labels, n_classes):
    logits = np.asarray(logits)
    loss = cross_entropy(logits, labels)[0] if len(labels) else float("nan")
    out = accuracy_metrics(np.argmax(logits, axis=1), labels, n_classes)
    out["loss"] = loss
    return out


def evaluate_classifier(clf, clouds, labels, n_classes):
    logits = np.array([clf.logits(p) for p in clouds])
    return evaluate_logits(logits, labels, n_classes)


def evaluate_pointnet(model: PointNetModel, clouds, labels):
    logits = np.array([pointnet_forward(model, p) for p in clouds])
    return evaluate_logits(logits, labels, model.n_classes)


def metric_row(epoch, split, m):
    return {"epoch": epoch, "split": split, "loss": m["loss"], "mAcc": m["mAcc"], "OA": m["OA"]}


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "mAcc", "OA"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})


def write_summary_json(summary, path):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=default)


# ------------------------------------------------------------- batches

def _epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _prepare(rng, clouds, cfg: TrainConfig):
    out = []
    for pts in clouds:
        if cfg.n_points and cfg.n_points < len(pts):
            pts = resample(pts, cfg.n_points, rng)
        if cfg.augment != "none":
            pts = augment(pts, rng, cfg.augment)
        out.append(pts)
    return np.stack(out)


def _split_arrays(dataset: Dataset, split, seed):
    idx = dataset.indices(split)
    if not idx:
        return [], np.zeros(0, dtype=int)
    return [dataset.clouds[i].points for i in idx], np.array([dataset.clouds[i].label for i in idx])


def _eval_split(dataset):
    return "val" if dataset.indices("val") else "test"


# ------------------------------------------------------------- teacher

def train_pointnet(dataset: Dataset, config: TrainConfig, seed, model: PointNetModel | None = None):
    """Adam training of the reference PointNet; returns the best-validation model.

    Returns ``(model, rows)`` with one metric row per epoch and split.
    """
    rng = np.random.default_rng(seed)
    if model is None:
        model = PointNetModel.create(dataset.n_classes, rng)
    elif model.n_classes != dataset.n_classes:
        raise ConfigError(f"classifier has {model.n_classes} outputs for {dataset.n_classes} classes")
    train_pts, train_y = _split_arrays(dataset, "train", seed)
    if not train_pts:
        raise ConfigError("dataset has no training clouds")
    ev = _eval_split(dataset)
    val_pts, val_y = _split_arrays(dataset, ev, seed)
    params = model.params()
    state = AdamState()
    lrs = {k: config.lr for k in params}
    best, best_acc, rows = model.copy(), -1.0, []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in _epoch_batches(rng, len(train_pts), config.batch_size):
            x = _prepare(rng, [train_pts[i] for i in batch], config)
            loss, grads, _ = pointnet_batch_grads(model, x, train_y[batch])
            if config.lr > 0:
                step_adam(params, grads, state, lrs, weight_decay=config.weight_decay)
            total += loss * len(batch)
        rows.append({"epoch": epoch, "split": "train", "loss": total / len(train_pts), "mAcc": float("nan"), "OA": float("nan")})
        if val_pts:
            m = evaluate_pointnet(model, val_pts, val_y)
            rows.append(metric_row(epoch, ev, m))
            log.info("teacher epoch %d loss %.4f %s OA %.4f", epoch, total / len(train_pts), ev, m["OA"])
            if m["OA"] > best_acc:
                best_acc, best = m["OA"], model.copy()
        else:
            best = model.copy()
    return best, rows


# ------------------------------------------------------------- end-to-end

def _fit_classifier(clf: GPEClassifier, dataset: Dataset, optimizer: Optimizer, cfg: TrainConfig, rng,
                    freeze=None, prepare=None, tag="e2e"):
    """Shared epoch loop; keeps the best model on the evaluation split."""
    train_pts, train_y = _split_arrays(dataset, "train", 0)
    if not train_pts:
        raise ConfigError("dataset has no training clouds")
    ev = _eval_split(dataset)
    val_pts, val_y = _split_arrays(dataset, ev, 0)
    if prepare is not None:
        val_pts = [prepare(p, np.random.default_rng(i)) for i, p in enumerate(val_pts)]
    params = clf.params()
    rows = []
    best, best_acc = clf.copy(), -1.0
    if val_pts:
        m = evaluate_classifier(clf, val_pts, val_y, dataset.n_classes)
        rows.append(metric_row(0, ev, m))
        best_acc = m["OA"]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for batch in _epoch_batches(rng, len(train_pts), cfg.batch_size):
            x = _prepare(rng, [train_pts[i] for i in batch], cfg)
            if prepare is not None:
                x = [prepare(p, rng) for p in x]
            step += 1
            try:
                loss, grads = classifier_batch_grads(clf, x, train_y[batch], freeze)
            except NonFinite as exc:
                raise NonFinite(f"{tag}: {exc}", step=step) from exc
            optimizer.step(params, grads)
            total += loss * len(batch)
        rows.append({"epoch": epoch, "split": "train", "loss": total / len(train_pts), "mAcc": float("nan"), "OA": float("nan")})
        if val_pts:
            m = evaluate_classifier(clf, val_pts, val_y, dataset.n_classes)
            rows.append(metric_row(epoch, ev, m))
            log.info("%s epoch %d loss %.4f %s OA %.4f", tag, epoch, total / len(train_pts), ev, m["OA"])
            if m["OA"] > best_acc:
                best_acc, best = m["OA"], clf.copy()
        else:
            best = clf.copy()
    return best, rows


def make_template(n_classes, n_gaussians, n_volumes, rng, tnet=True, tnet_gaussians=None, tnet_volumes=1024,
                  reg_hidden=(512, 256), head_hidden=(512, 256), init_scale=2.0):
    """Randomly initialised 3DGPE classifier."""
    enc = GaussianEncoder.random(n_gaussians, n_volumes, rng, init_scale)
    t = None
    if tnet:
        tenc = GaussianEncoder.random(tnet_gaussians or n_gaussians, tnet_volumes, rng, init_scale)
        t = TNet(tenc, MLP.create((tnet_volumes,) + tuple(reg_hidden) + (9,), rng, zero_last=True))
    head = MLP.create((n_volumes,) + tuple(head_hidden) + (n_classes,), rng)
    return GPEClassifier(enc, t, head)


def train_e2e(template: GPEClassifier, dataset: Dataset, optim: OptimConfig, seed, config: TrainConfig | None = None):
    """Train a 3DGPE classifier from its initial parameters.

    Returns ``(best_model, rows)``. :class:`NonFinite` carries the step index.
    """
    config = config or TrainConfig(epochs=10)
    clf = template.copy()
    rng = np.random.default_rng(seed)
    optimizer = Optimizer(optim, clf.encoders())
    return _fit_classifier(clf, dataset, optimizer, config, rng, optim.freeze)


# ------------------------------------------------------------- distillation

def data_prism(dataset: Dataset, split="train"):
    """Tight axis-aligned box around every point of a split."""
    pts = np.concatenate([dataset.clouds[i].points for i in dataset.indices(split)])
    return pts.min(axis=0), pts.max(axis=0)


def _distill_encoder(student, prefix, sample_fn, target_fn, cfg: DistillConfig, rng, tag):
    """Run L1 distillation batches; returns the held-out loss history."""
    optimizer = Optimizer(OptimConfig(method="adam", lrs=dict(cfg.lrs)), {prefix: student})
    held_x = sample_fn(np.random.default_rng(rng.integers(2**32)), cfg.heldout_samples)
    held_t = target_fn(held_x)
    params = student.params(prefix)
    history = [(0, distill_loss(student, held_t, held_x, prefix)[0])]
    for b in range(1, cfg.batches + 1):
        x = sample_fn(rng, cfg.samples_per_batch)
        try:
            _, grads = distill_loss(student, target_fn(x), x, prefix)
        except NonFinite as exc:
            raise NonFinite(f"{tag}: {exc}", step=b) from exc
        optimizer.step(params, grads)
        if b % cfg.eval_every == 0 or b == cfg.batches:
            history.append((b, distill_loss(student, held_t, held_x, prefix)[0]))
            log.info("%s batch %d held-out L1 %.5f", tag, b, history[-1][1])
    return history


@dataclass
class DistillResult:
    model: GPEClassifier
    history: dict  # stage name -> [(batch, held-out L1)]
    rows: list  # fine-tune metric rows

    def drop(self, stage):
        h = self.history[stage]
        return h[0][1] / max(h[-1][1], 1e-300)


def distill_pointnet(teacher: PointNetModel, template: GPEClassifier, dataset: Dataset, config: DistillConfig, seed):
    """Three-stage distillation of a PointNet teacher into a 3DGPE classifier.

    Stage 1 fits the student T-Net encoder to the teacher T-Net's per-point
    features on uniform prism samples. Stage 2 copies the teacher regressor
    and fits the main encoder on transformed samples. Stage 3 copies the
    teacher classifier and fine-tunes everything with encoder rates reduced.
    """
    if template.tnet is None:
        raise ConfigError("PointNet distillation needs a student T-Net")
    if template.encoder.n_volumes != teacher.embed_dim:
        raise ConfigError(f"student K={template.encoder.n_volumes} but teacher embeds {teacher.embed_dim}")
    if template.tnet.encoder.n_volumes != teacher.tnet_mlp.widths[-1]:
        raise ConfigError("student T-Net width must match the teacher T-Net feature width")
    rng = np.random.default_rng(seed)
    clf = template.copy()
    lo, hi = data_prism(dataset)
    history, rows = {}, []

    def prism(r, n):
        return r.uniform(lo, hi, size=(n, 3))

    if 1 in config.stages:
        history["stage1"] = _distill_encoder(
            clf.tnet.encoder, "tnet.enc", prism, lambda x: teacher.tnet_mlp(x), config, rng, "stage1")
    clf.tnet.regressor = teacher.tnet_reg.copy()
    if 2 in config.stages:
        train_idx = dataset.indices("train")
        transforms = [tnet_transform(teacher, dataset.clouds[i].points) for i in train_idx]

        def transformed(r, n):
            t = transforms[int(r.integers(len(transforms)))]
            return prism(r, n) @ t.T

        history["stage2"] = _distill_encoder(
            clf.encoder, "enc", transformed, lambda x: teacher.encoder(x), config, rng, "stage2")
    clf.head = teacher.classifier.copy()
    if 3 in config.stages:
        div = OptimConfig(lrs=dict(config.lrs)).finetune_lr_divisor
        scale = {"enc": 1.0 / div, "tnet.enc": 1.0 / div}
        optimizer = Optimizer(OptimConfig(method="adam", lrs=dict(config.lrs)), clf.encoders(), scale)
        clf, rows = _fit_classifier(clf, dataset, optimizer, config.finetune, rng, tag="stage3")
    return DistillResult(clf, history, rows)


def patch_points(cloud, n_centers, k, rng):
    """Stacked patch offsets of one cloud, ``(n_centers * k, 3)``."""
    ps = sample_patches(cloud, min(n_centers, len(cloud)), min(k, len(cloud)), rng)
    return ps.patches.reshape(-1, 3)


def distill_patch(teacher_embed_fn, student: GaussianEncoder, dataset: Dataset, config: DistillConfig, seed,
                  head: MLP | None = None):
    """Two-stage distillation for a patch tokenizer.

    Stage 1 fits the student to ``teacher_embed_fn`` on FPS+KNN patch
    offsets. Stage 2 (when ``head`` is given) fine-tunes the student with the
    head on max-pooled patch points at reduced encoder rates.
    """
    rng = np.random.default_rng(seed)
    student = student.copy()
    train = [dataset.clouds[i].points for i in dataset.indices("train")]
    if not train:
        raise ConfigError("dataset has no training clouds")

    def sample(r, n):
        out, total = [], 0
        while total < n:
            pts = patch_points(train[int(r.integers(len(train)))], config.n_centers, config.k, r)
            out.append(pts)
            total += len(pts)
        return np.concatenate(out)[:n]

    history, rows = {}, []
    if 1 in config.stages:
        history["stage1"] = _distill_encoder(student, "enc", sample, teacher_embed_fn, config, rng, "patch-stage1")
    clf = GPEClassifier(student, None, head.copy() if head is not None else None)
    if head is not None and 2 in config.stages:
        div = OptimConfig(lrs=dict(config.lrs)).finetune_lr_divisor
        optimizer = Optimizer(OptimConfig(method="adam", lrs=dict(config.lrs)), clf.encoders(), {"enc": 1.0 / div})
        prepare = lambda p, r: patch_points(p, config.n_centers, config.k, r)
        clf, rows = _fit_classifier(clf, dataset, optimizer, config.finetune, rng, prepare=prepare, tag="patch-stage2")
    return DistillResult(clf, history, rows)


def config_summary(obj):
    return asdict(obj)
