"""Command line: summarize | train | eval | infer | bench | selftest.

Exit codes: 0 success, 2 usage, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .arch import Network, count_multiadds, count_params, summary_table
from .augment import AnnotatedImage, draw_boxes, letterbox, to_chw
from .boxcodec import scales_for
from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .datasets import DataError, load_dataset
from .metrics import average_precision, confusion_report, evaluate_counts, precision_recall_f1
from .synthetic import SyntheticSceneSpec, gen_synthetic_dataset
from .trainer import DivergenceError, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
VAL_SEED_OFFSET = 1_000_003

log = logging.getLogger("yoloob")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML RunConfig file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=("yolo-ob", "yolov3-baseline"))
    p.add_argument("--bispfpn-layers", type=int, dest="bispfpn_layers")
    p.add_argument("--head", choices=("objectbox", "anchor"))
    p.add_argument("--mosaic", choices=("on", "off"))
    p.add_argument("--mosaic-prob", type=float, dest="mosaic_prob", help="per-sample mosaic probability")
    p.add_argument("--iou-thr", type=float, dest="iou_thr")
    p.add_argument("--conf-thr", type=float, dest="conf_thr")
    p.add_argument("--preset", choices=("full", "reduced"))
    p.add_argument("--box-cells", choices=("positives", "all"), dest="box_cells")
    p.add_argument("--obj-target", choices=("assigned", "overlap"), dest="obj_target")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="yoloob", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="layer table and parameter / multi-add totals")
    _common(p)
    p.add_argument("--no-table", action="store_true", help="print totals only")

    p = sub.add_parser("train", help="train from scratch")
    _common(p)
    p.add_argument("--data", help="training set (image dir with .txt labels, or JSON index)")
    p.add_argument("--val-data", dest="val_data")
    p.add_argument("--synthetic", type=int, dest="synthetic_train", help="number of synthetic training scenes")
    p.add_argument("--synthetic-val", type=int, dest="synthetic_val")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr_base")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="precision / recall / F1 / mAP")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="evaluate a saved detections report instead of a checkpoint")
    p.add_argument("--data")
    p.add_argument("--synthetic-val", type=int, dest="synthetic_val")
    p.add_argument("--pr-csv", help="write the PR curve here")
    p.add_argument("--report", help="write metrics JSON here")

    p = sub.add_parser("infer", help="detections report and optional overlays")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--synthetic-val", type=int, dest="synthetic_val")
    p.add_argument("--out", required=True, help="detections report (JSON)")
    p.add_argument("--overlays", help="directory for box-overlay PNGs")

    p = sub.add_parser("bench", help="forward latency and throughput")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--batch", type=int, default=16)

    p = sub.add_parser("selftest", help="fast internal consistency checks")
    _common(p)
    return ap


_OVERRIDABLE = ("seed", "model", "bispfpn_layers", "head", "iou_thr", "conf_thr", "preset", "box_cells",
                "obj_target", "mosaic_prob", "data", "val_data", "synthetic_train", "synthetic_val", "epochs",
                "batch_size", "lr_base")


def resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if args.config else RunConfig().to_dict()
    for key in _OVERRIDABLE:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if getattr(args, "mosaic", None) is not None:
        base["mosaic"] = args.mosaic == "on"
    return RunConfig.from_dict(base)


def _synthetic(n: int, seed: int, size: int) -> list[AnnotatedImage]:
    return gen_synthetic_dataset(SyntheticSceneSpec(num_images=n, height=size, width=size, seed=seed))


def _load_or_synth(path, n, seed, size) -> tuple[list[AnnotatedImage], list[str]]:
    if path:
        images, problems = load_dataset(path)
        if not images:
            raise DataError(f"{path}: no usable images")
        return images, problems
    return _synthetic(n, seed, size), []


def _report_problems(problems: list[str]) -> None:
    if problems:
        print(f"skipped {len(problems)} file(s):", file=sys.stderr)
        for p in problems:
            print(f"  {p}", file=sys.stderr)


def _network_from_checkpoint(path: str) -> tuple[Network, RunConfig]:
    manifest, _ = read_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["config"])
    net = Network(cfg.build_graph(), seed=cfg.seed)
    load_checkpoint(path, net)
    return net, cfg


# ---------------------------------------------------------------- commands

def cmd_summarize(cfg: RunConfig, show_table: bool = True) -> dict:
    g = cfg.build_graph()
    p = count_params(g)
    m16 = count_multiadds(g, 16)
    m1 = count_multiadds(g, 1)
    if show_table:
        print(summary_table(g))
        print()
    print(f"model={cfg.model} bispfpn_layers={cfg.bispfpn_layers if cfg.model == 'yolo-ob' else '-'} "
          f"head={cfg.head} preset={cfg.preset} input={g.input_size}")
    print(f"parameters: {p.params_m:.2f}M ({p.learnable_params})")
    print(f"multi-adds @batch16: {m16.multi_adds_g:.2f}G")
    print(f"multi-adds @batch1: {m1.multi_adds_g:.2f}G")
    return {"params": p.learnable_params, "multi_adds_16": m16.multi_adds, "multi_adds_1": m1.multi_adds}


def cmd_train(cfg: RunConfig, out: str) -> dict:
    size = cfg.build_graph().input_size
    train_set, p1 = _load_or_synth(cfg.data, cfg.synthetic_train, cfg.seed, size)
    val_set, p2 = _load_or_synth(cfg.val_data, cfg.synthetic_val, cfg.seed + VAL_SEED_OFFSET, size)
    _report_problems(p1 + p2)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.out = str(outdir)
    persisted = RunConfig.from_dict({**cfg.to_dict(), "out": None})
    persisted.dump(outdir / "config.json")
    result = train(cfg.train_config(), train_set, val_set, cfg.build_graph(), log_path=outdir / "metrics.jsonl")
    save_checkpoint(outdir / "checkpoint.ckpt", result.network, persisted.to_dict())
    last = result.history[-1]
    print(json.dumps(last, sort_keys=True))
    return last


def _metrics_from(dets, images, cfg: RunConfig) -> dict:
    gts = [im.boxes for im in images]
    counts = evaluate_counts(dets, gts, cfg.conf_thr, cfg.iou_thr)
    prf = precision_recall_f1(counts)
    curve = average_precision(dets, gts, cfg.iou_thr)
    return {"counts": counts, "prf": prf, "curve": curve}


def cmd_eval(cfg: RunConfig, checkpoint: str | None, detections: str | None, pr_csv=None, report=None) -> dict:
    if detections:
        doc = json.loads(Path(detections).read_text())
        if cfg.data is None:
            raise UsageError("--detections needs --data with the matching ground truth")
        images, problems = load_dataset(cfg.data)
        _report_problems(problems)
        by_id = {e["source_id"]: e for e in doc["images"]}
        dets = []
        for im in images:
            e = by_id.get(im.source_id, {"detections": []})
            boxes = np.asarray([d["box"] for d in e["detections"]], dtype=np.float64).reshape(-1, 4)
            dets.append((boxes, np.asarray([d["score"] for d in e["detections"]], dtype=np.float64)))
        res = _metrics_from(dets, images, cfg)
    else:
        if not checkpoint:
            raise UsageError("eval needs --checkpoint or --detections")
        net, ck_cfg = _network_from_checkpoint(checkpoint)
        size = net.graph.input_size
        images, problems = _load_or_synth(cfg.data, cfg.synthetic_val, ck_cfg.seed + VAL_SEED_OFFSET, size)
        _report_problems(problems)
        boxed = [letterbox(im, size) for im in images]
        dets_in = predict(net, [b[0] for b in boxed], cfg.batch_size, 0.0, cfg.nms_thr)
        dets = [(tf.invert(bx), sc) for (bx, sc), (_, tf) in zip(dets_in, boxed)]
        res = _metrics_from(dets, images, cfg)
    c, prf, curve = res["counts"], res["prf"], res["curve"]
    print(confusion_report(c))
    print(f"P={prf.precision:.4f} R={prf.recall:.4f} F1={prf.f1:.4f} mAP={curve.ap:.4f}")
    out = {"TP": c.TP, "FP": c.FP, "FN": c.FN, "TN": c.TN, "precision": prf.precision, "recall": prf.recall,
           "f1": prf.f1, "mAP": curve.ap, "iou_thr": cfg.iou_thr, "conf_thr": cfg.conf_thr}
    if pr_csv:
        Path(pr_csv).write_text(curve.to_csv())
    if report:
        Path(report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def cmd_infer(cfg: RunConfig, checkpoint: str, out: str, overlays: str | None = None) -> dict:
    net, ck_cfg = _network_from_checkpoint(checkpoint)
    size = net.graph.input_size
    images, problems = _load_or_synth(cfg.data, cfg.synthetic_val, ck_cfg.seed + VAL_SEED_OFFSET, size)
    _report_problems(problems)
    boxed = [letterbox(im, size) for im in images]
    dets_in = predict(net, [b[0] for b in boxed], cfg.batch_size, cfg.conf_thr, cfg.nms_thr)
    entries, dets = [], []
    for im, (bx, sc), (_, tf) in zip(images, dets_in, boxed):
        src = tf.invert(bx)
        src[:, [0, 2]] = np.clip(src[:, [0, 2]], 0, im.width)
        src[:, [1, 3]] = np.clip(src[:, [1, 3]], 0, im.height)
        dets.append((src, sc))
        entries.append({"source_id": im.source_id,
                        "detections": [{"box": [round(float(v), 4) for v in b], "score": round(float(s), 6)}
                                       for b, s in zip(src, sc)]})
        if overlays:
            draw_boxes(im, Path(overlays) / f"{im.source_id}.png", src, sc)
    res = _metrics_from(dets, images, cfg)
    c, prf = res["counts"], res["prf"]
    doc = {"images": entries,
           "summary": {"TP": c.TP, "FP": c.FP, "FN": c.FN, "TN": c.TN, "precision": prf.precision,
                       "recall": prf.recall, "f1": prf.f1, "mAP": res["curve"].ap}}
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    Path(out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"{sum(len(e['detections']) for e in entries)} detections over {len(entries)} images -> {out}")
    return doc


def _time_forward(net: Network, x: np.ndarray, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        net.forward(x)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        net.forward(x)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(cfg: RunConfig, checkpoint: str | None, iters: int = 100, warmup: int = 5, batch: int = 16) -> dict:
    if checkpoint:
        net, _ = _network_from_checkpoint(checkpoint)
    else:
        net = Network(cfg.build_graph(), seed=cfg.seed)
    size = net.graph.input_size
    rng = np.random.default_rng(cfg.seed)
    res = {}
    for b in sorted({1, batch}):
        x = rng.random((b, 3, size, size), dtype=np.float32)
        med = _time_forward(net, x, iters, warmup)
        res[b] = {"median_batch_s": med, "per_image_s": med / b, "fps": b / med}
        print(f"batch={b} median={med * 1e3:.2f}ms per_image={med / b * 1e3:.2f}ms fps={b / med:.1f}")
    return res


def cmd_selftest(cfg: RunConfig) -> bool:
    from . import selftest

    return selftest.run(verbose=True)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "summarize":
            cmd_summarize(cfg, not args.no_table)
        elif args.command == "train":
            cmd_train(cfg, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.detections, args.pr_csv, args.report)
        elif args.command == "infer":
            cmd_infer(cfg, args.checkpoint, args.out, args.overlays)
        elif args.command == "bench":
            cmd_bench(cfg, args.checkpoint, args.iters, args.warmup, args.batch)
        elif args.command == "selftest":
            return EXIT_OK if cmd_selftest(cfg) else 1
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc} {json.dumps(exc.record, default=float)}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
