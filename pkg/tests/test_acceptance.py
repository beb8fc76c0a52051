"""Acceptance criteria 1-9.

Each test prints one ``[criterion N] PASS|FAIL ...`` line straight to the
terminal (bypassing capture) and then asserts. Tolerances are pinned here.
"""

import time

import numpy as np
import pytest

from conftest import fd_max_rel_error, monte_carlo_fisher, random_classifier, random_encoder, random_fd_classifier, \
    random_tri
from gpe.backprop import backward_classify, distill_loss
from gpe.bench import throughput_ratio
from gpe.config import distill_config, load_config, teacher_train_config
from gpe.costs import PRESETS
from gpe.data import normalize, synth_dataset, synth_shape
from gpe.encoder import GPEClassifier, encode_cloud, encode_points, tnet_predict
from gpe.filtering import FilterConfig, build_filter, exact_weighted_likelihood, filter_mask, filtered_encode_cloud
from gpe.io import dumps, loads
from gpe.linalg import chol_to_precision
from gpe.optim import OptimConfig, fisher_matrix, step_ng_fisher, step_ng_mahalanobis
from gpe.pointnet import PointNetModel, pointnet_forward
from gpe.train import TrainConfig, distill_pointnet, evaluate_classifier, evaluate_pointnet, make_template, \
    train_e2e, train_pointnet

FD_TOL = 1e-5
MAHALANOBIS_TOL = 1e-12
FISHER_RESID_TOL = 1e-8
FISHER_MC_TOL = 0.05
VOXEL_SOLVER_TOL = 1e-6
COUNT_TOL = 0.10
TEACHER_OA = 0.90
STUDENT_GAP = 0.03
L1_DROP = 10.0
THROUGHPUT_MIN = 1.2


@pytest.fixture
def verdict(request, capsys):
    def emit(n, ok, detail, t0):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail} ({time.time() - t0:.1f}s)")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- shared models

@pytest.fixture(scope="session")
def desk():
    """Synthetic 4-class data, a trained teacher and its distilled N_G=32 student."""
    cfg = load_config()
    ds = synth_dataset(int(cfg["data.seed"]), int(cfg["data.n_per_class"]), int(cfg["data.n_points"]),
                       int(cfg["data.n_test_per_class"]), float(cfg["data.val_fraction"]))
    t0 = time.time()
    teacher, _ = train_pointnet(ds, teacher_train_config(cfg), int(cfg["train.seed"]))
    t_teacher = time.time() - t0
    template = make_template(ds.n_classes, 32, teacher.embed_dim, np.random.default_rng(0), tnet=True,
                             tnet_gaussians=32, tnet_volumes=teacher.tnet_mlp.widths[-1],
                             reg_hidden=tuple(teacher.tnet_reg.widths[1:-1]),
                             head_hidden=tuple(teacher.classifier.widths[1:-1]))
    res = distill_pointnet(teacher, template, ds, distill_config(cfg), 0)
    return {"ds": ds, "teacher": teacher, "distilled": res, "seconds": time.time() - t0, "teacher_s": t_teacher}


def _test_split(ds):
    idx = ds.indices("test")
    return [ds.clouds[i].points for i in idx], np.array([ds.clouds[i].label for i in idx])


# ---------------------------------------------------------------- criteria

def test_criterion_1_gradients(verdict):
    t0 = time.time()
    rng = np.random.default_rng(101)
    worst, where = 0.0, None
    for i in range(50):
        clf = random_fd_classifier(rng, tnet=bool(i % 2))
        x = rng.uniform(-1, 1, (int(rng.integers(1, 33)), 3))
        y = int(rng.integers(clf.head.widths[-1]))
        _, grads = backward_classify(clf.encoder, clf.tnet, clf.head, x, y)

        def cls_loss():
            clf.refresh()
            return backward_classify(clf.encoder, clf.tnet, clf.head, x, y)[0]
        err, w = fd_max_rel_error(cls_loss, clf.params(), grads)
        if err > worst:
            worst, where = err, ("classify", i, w)

        enc = clf.encoder
        target = encode_points(enc, x) + rng.normal(size=(len(x), enc.n_volumes))
        _, dgrads = distill_loss(enc, target, x, "s")

        def dist_loss():
            enc.refresh()
            return distill_loss(enc, target, x, "s")[0]
        err, w = fd_max_rel_error(dist_loss, enc.params("s"), dgrads)
        if err > worst:
            worst, where = err, ("distill", i, w)
    ok = worst <= FD_TOL and time.time() - t0 < 60
    verdict(1, ok, f"max relative FD error {worst:.2e} (tol {FD_TOL:g}) worst at {where}", t0)


def test_criterion_2_permutation(verdict):
    t0 = time.time()
    rng = np.random.default_rng(202)
    bad = 0
    models = [random_classifier(rng, n_gaussians=int(rng.integers(1, 9)), n_volumes=int(rng.integers(2, 17)),
                                tnet=bool(i % 2)) for i in range(20)]
    for i in range(1000):
        clf = models[i % len(models)]
        x = rng.uniform(-1, 1, (int(rng.integers(1, 129)), 3))
        p = rng.permutation(len(x))
        a, b = encode_cloud(clf.encoder, x), encode_cloud(clf.encoder, x[p])
        same = np.array_equal(a.values, b.values) and np.array_equal(clf.logits(x), clf.logits(x[p]))
        bad += not same
    ok = bad == 0 and time.time() - t0 < 60
    verdict(2, ok, f"{1000 - bad}/1000 permuted triples bit-identical", t0)


def test_criterion_3_natural_gradient(verdict):
    t0 = time.time()
    rng = np.random.default_rng(303)
    maha, resid = 0.0, 0.0
    for _ in range(20):
        e = random_encoder(rng, 4, 2)
        before = e.means.copy()
        gm, gc = rng.normal(size=(4, 3)), rng.normal(size=(4, 6))
        step_ng_mahalanobis(e, gm, gc, 1.0, 0.0)
        for g in range(4):
            cov = np.linalg.inv(chol_to_precision(e.chol[g]))
            ref = [sum(cov[a, b] * gm[g, b] for b in range(3)) for a in range(3)]
            maha = max(maha, np.abs((before[g] - e.means[g]) - ref).max() / max(1.0, np.abs(ref).max()))
        f = fisher_matrix(e.means, e.chol)
        mu0, l0 = e.means.copy(), e.chol.copy()
        step_ng_fisher(e, gm, gc, 0.01)
        delta = np.concatenate([e.means - mu0, e.chol - l0], axis=1) / -0.01
        resid = max(resid, np.abs(np.einsum("gij,gj->gi", f, delta) - np.concatenate([gm, gc], axis=1)).max())
    mc_err = 0.0
    for _ in range(10):
        chol, mean = random_tri(rng), rng.normal(size=3)
        f = fisher_matrix(mean, chol)
        mc = monte_carlo_fisher(mean, chol, 1_000_000, rng)
        mc_err = max(mc_err, np.linalg.norm(mc - f) / np.linalg.norm(f))
    ok = maha <= MAHALANOBIS_TOL and resid <= FISHER_RESID_TOL and mc_err <= FISHER_MC_TOL
    ok = ok and time.time() - t0 < 300
    verdict(3, ok, f"mahalanobis {maha:.1e}, fisher residual {resid:.1e}, Monte Carlo Frobenius {mc_err:.3f}", t0)


def test_criterion_4_filters(verdict):
    t0 = time.time()
    rng = np.random.default_rng(404)
    pairs = []
    for _ in range(100):
        m = random_encoder(rng, int(rng.integers(4, 33)), int(rng.integers(4, 33)), spread=0.8)
        m.chol *= rng.uniform(0.7, 4.0)
        m.refresh()
        pairs.append((m, rng.uniform(-1, 1, (int(rng.integers(32, 257)), 3))))
    lines, ok = [], True
    for method in ("distance", "bbox", "voxel"):
        for t in (0.1, 0.01):
            cfg = FilterConfig(method=method, t_distance=t, t_bbox=t, t_voxel=t)
            unsound, dev_ratio, filtered = 0, 0.0, []
            for m, x in pairs:
                b = build_filter(m, cfg)
                mask = filter_mask(m, x, b)
                w = exact_weighted_likelihood(m, x)
                tol = VOXEL_SOLVER_TOL if method == "voxel" else 0.0
                unsound += int(np.sum(~mask & (w >= t + tol)))
                feat, st = filtered_encode_cloud(m, x, b, return_stats=True)
                dev = np.abs(feat.values - encode_cloud(m, x).values).max()
                dev_ratio = max(dev_ratio, dev / (m.n_gaussians * t))
                filtered.append(st.fraction_filtered)
            ok = ok and unsound == 0 and dev_ratio <= 1.0
            lines.append(f"{method}@{t:g}: unsound {unsound}, dev/bound {dev_ratio:.3f}, "
                         f"filtered {100 * np.mean(filtered):.0f}%")
    ok = ok and time.time() - t0 < 300
    verdict(4, ok, "; ".join(lines), t0)


def test_criterion_5_costs(verdict):
    t0 = time.time()
    gm, gp = PRESETS["table1-gpe"]()
    pm, pp = PRESETS["table1-pointnet"]()
    checks = [abs(gm / 0.068e9 - 1) <= COUNT_TOL, abs(pm / 0.582e9 - 1) <= COUNT_TOL, pm / gm >= 8,
              abs(gp / 1.39e6 - 1) <= COUNT_TOL, abs(pp / 1.61e6 - 1) <= COUNT_TOL]
    verdict(5, all(checks), f"3DGPE {gm / 1e9:.3f}G/{gp / 1e6:.3f}M, PointNet {pm / 1e9:.3f}G/{pp / 1e6:.3f}M, "
                            f"ratio {pm / gm:.2f}", t0)


@pytest.mark.slow
def test_criterion_6_distillation(verdict, desk):
    t0 = time.time() - desk["seconds"]
    ds, teacher, res = desk["ds"], desk["teacher"], desk["distilled"]
    x, y = _test_split(ds)
    n_train = len(ds.indices("train")) + len(ds.indices("val"))
    t_oa = evaluate_pointnet(teacher, x, y)["OA"]
    s_oa = evaluate_classifier(res.model, x, y, ds.n_classes)["OA"]
    d1, d2 = res.drop("stage1"), res.drop("stage2")
    ok = (n_train == 500 and len(y) == 200 and t_oa >= TEACHER_OA and s_oa >= t_oa - STUDENT_GAP
          and d1 >= L1_DROP and d2 >= L1_DROP and time.time() - t0 < 900)
    verdict(6, ok, f"teacher OA {t_oa:.3f}, student OA {s_oa:.3f}, L1 drop stage1 {d1:.1f}x stage2 {d2:.1f}x", t0)


@pytest.mark.slow
def test_criterion_7_optimizer_trend(verdict, desk):
    t0 = time.time()
    ds = desk["ds"]
    x, y = _test_split(ds)
    cfg = TrainConfig(epochs=10, batch_size=16, n_points=256)
    oa = {"adam": [], "ng_mahalanobis": []}
    for seed in range(5):
        tmpl = make_template(ds.n_classes, 32, 1024, np.random.default_rng(seed), tnet=False)
        for method in oa:
            model, _ = train_e2e(tmpl, ds, OptimConfig.for_method(method), seed, cfg)
            oa[method].append(evaluate_classifier(model, x, y, ds.n_classes)["OA"])
    a, n = np.array(oa["adam"]), np.array(oa["ng_mahalanobis"])
    ok = n.mean() >= a.mean() and a.std() >= n.std() and time.time() - t0 < 1800
    verdict(7, ok, f"adam OA {a.mean():.4f}+-{a.std():.4f}, ng_mahalanobis OA {n.mean():.4f}+-{n.std():.4f}", t0)


@pytest.mark.slow
def test_criterion_8_throughput(verdict, desk):
    t0 = time.time()
    clf = desk["distilled"].model
    enc = clf.encoder
    t = 0.10
    bounds = build_filter(enc, FilterConfig(method="bbox", t_bbox=t))
    rng = np.random.default_rng(808)
    ratios, devs, frac = [], [], []
    for kind in ("sphere", "cube", "cone", "torus"):
        x = normalize(synth_shape(kind, 2048, rng))
        x = x @ tnet_predict(clf.tnet, x).T  # main-encoder input space
        feat, st = filtered_encode_cloud(enc, x, bounds, return_stats=True)
        devs.append(np.abs(feat.values - encode_cloud(enc, x).values).max())
        frac.append(st.fraction_filtered)
        r, _ = throughput_ratio(lambda: filtered_encode_cloud(enc, x, bounds), lambda: encode_cloud(enc, x),
                                rounds=5)
        ratios.append(r)
    ratio = float(np.median(ratios))
    ok = ratio >= THROUGHPUT_MIN and max(devs) <= enc.n_gaussians * t and time.time() - t0 < 300
    verdict(8, ok, f"median throughput ratio {ratio:.2f}x (per cloud {', '.join(f'{r:.2f}' for r in ratios)}), "
                   f"filtered {100 * np.mean(frac):.0f}% of pairs, max deviation {max(devs):.3g}", t0)


def test_criterion_9_serialization(verdict):
    t0 = time.time()
    rng = np.random.default_rng(909)
    x = rng.normal(size=(40, 3))
    models = [random_encoder(rng), random_classifier(rng), random_classifier(rng, tnet=False),
              GPEClassifier(random_encoder(rng), random_classifier(rng).tnet, None),
              PointNetModel.create(4, rng)]
    fails = []
    for m in models:
        b = dumps(m)
        back = loads(b)
        same = dumps(back) == b
        if isinstance(m, PointNetModel):
            same = same and np.array_equal(pointnet_forward(m, x), pointnet_forward(back, x))
        elif isinstance(m, GPEClassifier) and m.head is not None:
            same = same and np.array_equal(m.logits(x), back.logits(x))
        else:
            enc_a = m.encoder if isinstance(m, GPEClassifier) else m
            enc_b = back.encoder if isinstance(back, GPEClassifier) else back
            same = same and np.array_equal(encode_cloud(enc_a, x).values, encode_cloud(enc_b, x).values)
        if not same:
            fails.append(type(m).__name__)
    verdict(9, not fails and time.time() - t0 < 60, f"{len(models) - len(fails)}/{len(models)} model types "
                                                     f"byte-identical with bit-exact outputs", t0)
