"""``gpe`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import latency_bench, resolve_threads, throughput_ratio
from .config import (distill_config, e2e_train_config, filter_config, load_config, optim_config,
                     teacher_train_config)
from .costs import (PRESETS, CostReport, count_macs_gpe, count_macs_pointnet, count_params_gpe,
                    count_params_pointnet, peak_alloc_estimate_gpe, peak_alloc_estimate_pointnet)
from .data import load_manifest, save_dataset, synth_dataset
from .encoder import GPEClassifier, GaussianEncoder, TNet, encode_cloud
from .errors import GPEError, NonFinite
from .filtering import FilteredClassifier, filtered_encode_cloud, build_filter
from .io import load_model, save_model
from .mlp import MLP, Layer
from .pointnet import PointNetModel, pointnet_forward
from .train import (accuracy_metrics, distill_pointnet, evaluate_classifier, evaluate_pointnet, make_template,
                    train_e2e, train_pointnet, write_metrics_csv, write_summary_json)

log = logging.getLogger("gpe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (GPE_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="gpe", description="Gaussian point encoder toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic shape dataset")
    p.add_argument("--out", required=True, help="output directory (manifest.json is written there)")
    _common(p)

    p = sub.add_parser("train-teacher", help="train the reference PointNet")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="prefix for <prefix>.csv and <prefix>.json")
    _common(p)

    p = sub.add_parser("distill", help="distill a PointNet teacher into a 3DGPE classifier")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics")
    _common(p)

    p = sub.add_parser("train-e2e", help="train a 3DGPE classifier from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics")
    _common(p)

    p = sub.add_parser("eval", help="mAcc and OA of a model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    _common(p)

    p = sub.add_parser("bench", help="latency, MACs and parameter report")
    p.add_argument("--model", required=True)
    p.add_argument("--n-points", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the JSON report here")
    _common(p)

    p = sub.add_parser("flops", help="analytic multiply-add count")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--model")
    p.add_argument("--n-points", type=int, default=2048)
    _common(p)

    p = sub.add_parser("export", help="write a model as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("import", help="convert exported JSON back to a 3DGPE1 file")
    p.add_argument("--json", dest="src", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    return parser


# ------------------------------------------------------------- commands

def _dataset(path, cfg):
    return load_manifest(path)


def _emit_metrics(prefix, rows, summary):
    if prefix:
        write_metrics_csv(rows, f"{prefix}.csv")
        write_summary_json(summary, f"{prefix}.json")


def cmd_gen_data(args, cfg):
    ds = synth_dataset(int(cfg["data.seed"]), int(cfg["data.n_per_class"]), int(cfg["data.n_points"]),
                       int(cfg["data.n_test_per_class"]), float(cfg["data.val_fraction"]))
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds.clouds)} clouds to {path}")


def cmd_train_teacher(args, cfg):
    ds = _dataset(args.data, cfg)
    tc = teacher_train_config(cfg)
    model, rows = train_pointnet(ds, tc, int(cfg["train.seed"]))
    save_model(model, args.out)
    _emit_metrics(args.metrics, rows, {"config": vars(tc), "final": rows[-1] if rows else None})
    print(f"saved teacher to {args.out}")


def _summarize_eval(m):
    return f"mAcc {100 * m['mAcc']:.2f}  OA {100 * m['OA']:.2f}"


def cmd_distill(args, cfg):
    ds = _dataset(args.data, cfg)
    teacher = load_model(args.teacher)
    if not isinstance(teacher, PointNetModel):
        raise GPEError(f"{args.teacher} is not a PointNet teacher")
    rng = np.random.default_rng(args.seed)
    template = make_template(ds.n_classes, int(cfg["model.n_gaussians"]), teacher.embed_dim, rng, tnet=True,
                             tnet_gaussians=int(cfg["model.tnet_gaussians"]),
                             tnet_volumes=teacher.tnet_mlp.widths[-1],
                             reg_hidden=tuple(teacher.tnet_reg.widths[1:-1]),
                             head_hidden=tuple(teacher.classifier.widths[1:-1]),
                             init_scale=float(cfg["model.init_scale"]))
    res = distill_pointnet(teacher, template, ds, distill_config(cfg), args.seed)
    save_model(res.model, args.out)
    summary = {"l1_history": res.history, "l1_drop": {k: res.drop(k) for k in res.history}}
    _emit_metrics(args.metrics, res.rows, summary)
    for k in res.history:
        print(f"{k}: held-out L1 {res.history[k][0][1]:.5f} -> {res.history[k][-1][1]:.5f} ({res.drop(k):.1f}x)")
    print(f"saved student to {args.out}")


def cmd_train_e2e(args, cfg):
    ds = _dataset(args.data, cfg)
    rng = np.random.default_rng(args.seed)
    template = make_template(ds.n_classes, int(cfg["model.n_gaussians"]), int(cfg["model.n_volumes"]), rng,
                             tnet=bool(cfg["model.tnet"]), tnet_gaussians=int(cfg["model.tnet_gaussians"]),
                             head_hidden=tuple(cfg["model.head_hidden"]),
                             init_scale=float(cfg["model.init_scale"]))
    oc = optim_config(cfg)
    model, rows = train_e2e(template, ds, oc, args.seed, e2e_train_config(cfg))
    save_model(model, args.out)
    _emit_metrics(args.metrics, rows, {"method": oc.method, "final": rows[-1] if rows else None})
    print(f"saved model to {args.out}")


def cmd_eval(args, cfg):
    ds = _dataset(args.data, cfg)
    model = load_model(args.model)
    idx = ds.indices(args.split)
    if not idx:
        raise GPEError(f"split {args.split!r} is empty")
    clouds = [ds.clouds[i].points for i in idx]
    labels = np.array([ds.clouds[i].label for i in idx])
    if isinstance(model, PointNetModel):
        m = evaluate_pointnet(model, clouds, labels)
    elif isinstance(model, GPEClassifier) and model.head is not None:
        fc = filter_config(cfg)
        clf = FilteredClassifier.build(model, fc) if fc.method != "none" else model
        m = evaluate_classifier(clf, clouds, labels, ds.n_classes)
    else:
        raise GPEError("model has no classifier head")
    if args.json:
        print(json.dumps({"mAcc": m["mAcc"], "OA": m["OA"], "loss": m["loss"], "n": len(labels)}))
    else:
        print(_summarize_eval(m))


def _bench_cloud(n, seed):
    from .data import normalize, synth_shape
    return normalize(synth_shape("torus", n, np.random.default_rng(seed)))


def cmd_bench(args, cfg):
    model = load_model(args.model)
    n = args.n_points or int(cfg["bench.n_points"])
    pts = _bench_cloud(n, args.seed)
    warm, iters, threads = int(cfg["bench.warmup"]), int(cfg["bench.iters"]), args.threads or int(cfg["bench.threads"])
    extra = {}
    if isinstance(model, PointNetModel):
        macs, params = count_macs_pointnet(model, n), count_params_pointnet(model)
        stats = latency_bench(lambda: pointnet_forward(model, pts), warm, iters, threads)
        alloc = peak_alloc_estimate_pointnet(model, n)
    else:
        fc = filter_config(cfg)
        enc = model if isinstance(model, GaussianEncoder) else model.encoder
        params = count_params_gpe(model)
        alloc = peak_alloc_estimate_gpe(model, n)
        if fc.method == "none":
            macs = count_macs_gpe(model, n)
            stats = latency_bench(lambda: encode_cloud(enc, pts), warm, iters, threads)
        else:
            bounds = build_filter(enc, fc)
            _, fstats = filtered_encode_cloud(enc, pts, bounds, return_stats=True)
            macs = count_macs_gpe(model, n, filter_stats=fstats)
            stats = latency_bench(lambda: filtered_encode_cloud(enc, pts, bounds), warm, iters, threads)
            ratio, detail = throughput_ratio(lambda: filtered_encode_cloud(enc, pts, bounds),
                                             lambda: encode_cloud(enc, pts), threads=threads)
            extra = {"filtered_fraction": fstats.fraction_filtered, "throughput_ratio": ratio, **detail}
    report = CostReport(macs, params, stats, alloc, {"model": args.model, "n_points": n, **extra})
    print(report.to_text())
    if extra:
        print(f"filtered pairs {100 * extra['filtered_fraction']:.1f}%  throughput ratio {extra['throughput_ratio']:.2f}x")
    if args.report:
        write_summary_json(report.to_dict(), args.report)


def cmd_flops(args, cfg):
    if args.preset:
        macs, params = PRESETS[args.preset]()
    else:
        model = load_model(args.model)
        if isinstance(model, PointNetModel):
            macs, params = count_macs_pointnet(model, args.n_points), count_params_pointnet(model)
        else:
            macs, params = count_macs_gpe(model, args.n_points), count_params_gpe(model)
    print(f"{macs / 1e9:.3f}G MACs  {params / 1e6:.3f}M params  ({macs} MACs, {params} params)")


def _mlp_json(m: MLP):
    return [{"weight": l.weight.tolist(), "bias": l.bias.tolist(), "activation": l.activation} for l in m.layers]


def _mlp_from(items):
    return MLP([Layer(np.array(d["weight"], dtype=float), np.array(d["bias"], dtype=float), d["activation"])
                for d in items])


def _enc_json(e: GaussianEncoder):
    return {k: getattr(e, k).tolist() for k in ("means", "chol", "alpha", "bias")}


def _enc_from(d):
    return GaussianEncoder(*(np.array(d[k], dtype=float) for k in ("means", "chol", "alpha", "bias")))


def model_to_json(model):
    if isinstance(model, PointNetModel):
        return {"kind": "pointnet", "stacks": [_mlp_json(s) for s in model.stacks()]}
    if isinstance(model, GaussianEncoder):
        return {"kind": "gpe", "encoder": _enc_json(model), "tnet": None, "head": None}
    return {
        "kind": "gpe",
        "encoder": _enc_json(model.encoder),
        "tnet": None if model.tnet is None else {"encoder": _enc_json(model.tnet.encoder),
                                                 "regressor": _mlp_json(model.tnet.regressor)},
        "head": None if model.head is None else _mlp_json(model.head),
    }


def model_from_json(d):
    try:
        if d["kind"] == "pointnet":
            return PointNetModel(*(_mlp_from(s) for s in d["stacks"]))
        enc = _enc_from(d["encoder"])
        tnet = None if d["tnet"] is None else TNet(_enc_from(d["tnet"]["encoder"]), _mlp_from(d["tnet"]["regressor"]))
        head = None if d["head"] is None else _mlp_from(d["head"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GPEError(f"malformed model JSON: {exc}") from exc
    return enc if tnet is None and head is None else GPEClassifier(enc, tnet, head)


def cmd_export(args, cfg):
    with open(args.out, "w") as f:
        json.dump(model_to_json(load_model(args.model)), f)
    print(f"exported {args.model} to {args.out}")


def cmd_import(args, cfg):
    try:
        with open(args.src) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise GPEError(f"{args.src}: invalid JSON: {exc}") from exc
    save_model(model_from_json(d), args.out)
    print(f"imported {args.src} to {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-e2e": cmd_train_e2e,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "export": cmd_export,
    "import": cmd_import,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        with threadpool_limits(limits=resolve_threads(args.threads)):
            COMMANDS[args.command](args, cfg)
    except NonFinite as exc:
        step = f" at step {exc.step}" if exc.step is not None else ""
        print(f"error: training diverged{step}: {exc}", file=sys.stderr)
        return 2
    except (GPEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
