"""Command-line surface.

Exit codes: 0 success, 2 usage error (argparse), 3 data error, 4 numeric
failure.  Report-producing commands render matplotlib figures next to their
CSV outputs.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import imgproc, metrics, plots, viewpoint
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import build_configs
from .datasets import DataError, generate_synthetic_dataset, load_manifest
from .model import ModelError, QualityModel, composite_gradient_check
from .gcn import build_graph, stack_gradient_check, write_graph_csv
from .nn.gradcheck import run_op_suite
from .nn.layers import NetworkError, NumericError
from .training import train_all, write_training_log

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _cmd_synth(args) -> int:
    records = generate_synthetic_dataset(
        args.out, n_refs=args.refs, seed=args.seed,
        height=args.height, width=args.width)
    print(f"wrote {len(records)} distorted images and manifest.csv to {args.out}")
    return EXIT_OK


def _cmd_viewpoints(args) -> int:
    model_cfg, _ = build_configs(args.config)
    rgb = imgproc.read_png(args.image)
    if rgb.ndim == 2:
        rgb = np.stack([rgb] * 3, axis=-1)
    gray = imgproc.to_gray(rgb)
    vps, heat = viewpoint.detect_viewpoints(gray, model_cfg.detector)
    viewpoint.write_viewpoint_csv(args.out, vps)
    print(f"selected {len(vps)} viewpoints -> {args.out}"
          + (" (heatmap exhausted early)" if vps.exhausted else ""))
    if args.dump_heatmap:
        viewpoint.dump_heatmap_png(args.dump_heatmap, heat)
        print(f"heatmap -> {args.dump_heatmap}")
    if args.figure:
        plots.heatmap_figure(args.figure, heat, vps)
        print(f"figure -> {args.figure}")
    if args.dump_graph:
        if len(vps) == 0:
            print("no viewpoints: skipping graph dump", file=sys.stderr)
        else:
            write_graph_csv(args.dump_graph, build_graph(vps))
            print(f"graph -> {args.dump_graph}")
    return EXIT_OK


def _cmd_viewports(args) -> int:
    rgb = imgproc.read_png(args.image)
    vps = viewpoint.read_viewpoint_csv(args.viewpoints)
    views = viewpoint.extract_viewports(rgb, vps, fov=args.fov, size=args.size)
    os.makedirs(args.out, exist_ok=True)
    for i in range(views.shape[0]):
        imgproc.write_png(os.path.join(args.out, f"viewport_{i:02d}.png"), views[i])
    print(f"wrote {views.shape[0]} viewports to {args.out}")
    return EXIT_OK


def _parse_stages(text: str) -> tuple[int, ...]:
    if text == "all":
        return (1, 2, 3)
    try:
        stage = int(text)
    except ValueError:
        raise DataError(f"invalid stage {text!r} (expected 1, 2, 3 or all)") from None
    if stage not in (1, 2, 3):
        raise DataError(f"invalid stage {stage} (expected 1, 2, 3 or all)")
    return (stage,)


def _cmd_train(args) -> int:
    model_cfg, train_cfg = build_configs(args.config, seed=args.seed)
    records = load_manifest(args.manifest)
    if args.holdout_refs > 0:
        records, held_out = metrics.split_by_reference(
            records, n_test_refs=args.holdout_refs, seed=args.split_seed)
        held_refs = sorted({r.ref_id for r in held_out})
        print(f"holding out {len(held_out)} images from refs {', '.join(held_refs)}")
    stages = _parse_stages(args.stage)

    if args.init:
        model = load_checkpoint(args.init)
        print(f"initialized from {args.init}")
    else:
        model = QualityModel(model_cfg, seed=train_cfg.seed)

    logs = train_all(model, records, train_cfg, stages=stages,
                     progress=lambda msg: print(msg, flush=True))
    save_checkpoint(model, args.checkpoint)
    print(f"checkpoint -> {args.checkpoint}")
    log_path = os.path.splitext(args.checkpoint)[0] + "_train_log.csv"
    write_training_log(log_path, logs)
    print(f"training log -> {log_path}")
    if logs:
        fig_path = os.path.splitext(args.checkpoint)[0] + "_train_loss.png"
        plots.training_curve_figure(fig_path, logs)
        print(f"loss curves -> {fig_path}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rgb = imgproc.read_png(args.image)
    if rgb.ndim == 2:
        rgb = np.stack([rgb] * 3, axis=-1)
    q, q_l, q_g = model.predict(rgb, name=args.image)
    print(f"q={q:.6f} q_local={q_l:.6f} q_global={q_g:.6f}")
    return EXIT_OK


def _report_rows(model: QualityModel, records, images):
    preds = []
    for rec, img in zip(records, images):
        q, q_l, q_g = model.predict(img, name=rec.image_path)
        preds.append((rec, q, q_l, q_g))
    return preds


def _evaluate_split(preds):
    mos = np.array([rec.mos for rec, *_ in preds])
    raw = np.array([q for _, q, _, _ in preds])
    report = metrics.evaluate_scores(raw, mos)
    _, _, params = metrics.plcc_rmse(raw, mos)
    mapped = metrics.logistic_map(params, raw)
    return report, mos, raw, mapped


def _cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_manifest(args.manifest)
    train_recs, test_recs = metrics.split_by_reference(
        records, n_test_refs=args.test_refs, seed=args.split_seed)
    print(f"split: {len(train_recs)} train / {len(test_recs)} test images")

    out_base = os.path.splitext(args.out)[0]
    rows = []
    for split_name, recs in (("train", train_recs), ("test", test_recs)):
        images = [imgproc.read_png(r.image_path) for r in recs]
        preds = _report_rows(model, recs, images)
        report, mos, raw, mapped = _evaluate_split(preds)
        rows.append((split_name, report))
        print(f"{split_name:5s}  n={report.n:3d}  SROCC={report.srocc:.4f}  "
              f"PLCC={report.plcc:.4f}  RMSE={report.rmse:.4f}")

        scatter_csv = f"{out_base}_{split_name}_scatter.csv"
        with open(scatter_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_path", "mos", "raw_pred", "mapped_pred"])
            for (rec, q, _, _), m in zip(preds, mapped):
                writer.writerow([rec.image_path, f"{rec.mos:.9g}", f"{q:.9g}", f"{m:.9g}"])
        plots.scatter_figure(f"{out_base}_{split_name}_scatter.png",
                             mos, raw, mapped, report,
                             title=f"{split_name} split")

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "n", "srocc", "plcc", "rmse",
                         "auc_ds", "auc_bw", "c0", "logistic_fallback"])
        for split_name, report in rows:
            writer.writerow([
                split_name, report.n, f"{report.srocc:.6f}", f"{report.plcc:.6f}",
                f"{report.rmse:.6f}",
                "" if report.auc_ds is None else f"{report.auc_ds:.6f}",
                "" if report.auc_bw is None else f"{report.auc_bw:.6f}",
                "" if report.c0 is None else f"{report.c0:.6f}",
                int(report.logistic_fallback),
            ])
    print(f"report -> {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    tol = 1e-4
    print("running finite-difference gradient suite (float64)...")
    failures = 0
    results = run_op_suite(n_instances=args.instances, seed=args.seed)
    results["gcn_stack"] = stack_gradient_check(n_instances=args.instances, seed=args.seed)
    results["composed_model_loss"] = composite_gradient_check(
        n_instances=args.instances, seed=args.seed)
    for name in sorted(results):
        err = results[name]
        status = "ok" if err < tol else "FAIL"
        if err >= tol:
            failures += 1
        print(f"  {name:24s} max rel err {err:.3e}  [{status}]")
    if failures:
        print(f"{failures} op(s) exceeded tolerance {tol}", file=sys.stderr)
        return EXIT_NUMERIC
    print("all gradients within tolerance")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omniqa",
        description="Blind omnidirectional image quality assessment "
                    "(viewport graph + global bilinear branch).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic distorted dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--refs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("viewpoints", help="detect salient viewing directions")
    p.add_argument("--image", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-heatmap", default=None)
    p.add_argument("--figure", default=None)
    p.add_argument("--dump-graph", default=None,
                   help="write affinity + normalized adjacency as CSV")
    p.set_defaults(func=_cmd_viewpoints)

    p = sub.add_parser("viewports", help="extract gnomonic viewports")
    p.add_argument("--image", required=True)
    p.add_argument("--viewpoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fov", type=float, default=90.0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_viewports)

    p = sub.add_parser("train", help="run the three-stage training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", default="all", help="1, 2, 3 or all")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--holdout-refs", type=int, default=0,
                   help="exclude this many references from training")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="score one panorama")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="metric report over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--test-refs", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, metrics.UndefinedMetric, NetworkError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ModelError, FileNotFoundError,
            OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
