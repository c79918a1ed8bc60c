"""``cnncascade`` command line: detect, train, eval, bench, pack-inspect, synth, manifest."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .cascade import MODES, RULES, DetectorParams, ParamsError, RunStats
from .evalharness import (ROC_HEADER, SUMMARY_HEADER, AnnotationError, join_by_image, match_discrete,
                          match_rect_multiscale, parse_detections_jsonl, parse_fddb, parse_rect_csv, score_fddb,
                          score_prf1_images, sweep_min_neighbors, write_csv)
from .imageio import ImageFormatError, draw_rects, read_image, write_image
from .modelspec import STAGE1_STRIDE, STAGE1_WINDOW, ModelError, load_model, manifest, save_model
from .nnkernel import TrainingError
from .pipeline import BENCH_HEADER, Detector, PipelineError, bench
from .pyramid import build_pyramid, pack_fcnr
from .synthetic import make_scene
from .trainer import LOG_HEADER, TrainConfig, train_cascade, train_from_samples

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_TRAINING = 4
EXIT_PARTIAL = 5

MODEL_ENV = "CCNC_MODEL"
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp")

log = logging.getLogger("cnncascade")


class UsageError(Exception):
    pass


@dataclass
class Config:
    params: DetectorParams = field(default_factory=DetectorParams)
    model: str | None = None
    inputs: list[str] = field(default_factory=list)
    output: str | None = None
    workers: int = 1
    seed: int = 0


def default_model_path() -> str:
    env = os.environ.get(MODEL_ENV)
    if env:
        return env
    return str(resources.files("cnncascade") / "data" / "toy.ccnc")


def _load(path: str | None):
    path = path or default_model_path()
    if not Path(path).is_file():
        raise UsageError(f"model not found: {path}")
    return load_model(path)


def _params(a) -> DetectorParams:
    return DetectorParams(min_size=a.min_size, scale_factor=a.scale_factor, t1=a.t1, t2=a.t2, tm=a.tm,
                          min_neighbors=a.min_neighbors, rule=a.rule, mode=a.mode).validate()


def _config(a) -> Config:
    return Config(params=_params(a), model=getattr(a, "model", None), inputs=list(getattr(a, "images", [])),
                  output=getattr(a, "out", None), workers=a.workers, seed=a.seed)


def _expand_images(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            out.append(p)
    return out


# ---------------------------------------------------------------- commands


def cmd_detect(a) -> int:
    cfg = _config(a)
    model = _load(cfg.model)
    images = _expand_images(cfg.inputs)
    missing = [str(p) for p in images if not p.is_file()]
    if missing:
        raise UsageError(f"image not found: {missing[0]}")
    if a.annotate_dir:
        Path(a.annotate_dir).mkdir(parents=True, exist_ok=True)
    failures = 0
    out = open(cfg.output, "w") if cfg.output else sys.stdout
    stats_fh = open(a.stats, "w", newline="") if a.stats else None
    try:
        stats_w = csv.writer(stats_fh, lineterminator="\n") if stats_fh else None
        if stats_w:
            stats_w.writerow(RunStats.TABLE_HEADER)
        with Detector(model, cfg.params, cfg.workers) as det:
            for path in images:
                try:
                    raster = read_image(path)
                    dets, stats = det.detect(raster)
                except (ImageFormatError, OSError, ValueError) as exc:
                    failures += 1
                    print(f"error: {path}: {exc}", file=sys.stderr)
                    continue
                for d in dets:
                    out.write(json.dumps(d.to_record(path.name)) + "\n")
                if stats_w:
                    stats_w.writerow(stats.table_row(path.name))
                if a.annotate_dir:
                    write_image(Path(a.annotate_dir) / (path.stem + ".pgm" if raster.ndim == 2 else path.stem + ".ppm"),
                                draw_rects(raster, [d.rect for d in dets], 255, 2))
    finally:
        if cfg.output:
            out.close()
        if stats_fh:
            stats_fh.close()
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_train(a) -> int:
    cfg = TrainConfig(seed=a.seed, lr=a.lr, epochs=a.epochs, selective_epochs=a.selective_epochs,
                      pool_mode=a.pool_mode)
    if a.quick:
        cfg = replace(cfg, stage1_pos=1500, stage1_neg=2000, holdout_pos=500, holdout_neg=500,
                      selective_pos=800, selective_neg=1200, mining_scenes=20)
    if a.lr < 0 or a.epochs < 0 or a.selective_epochs < 0:
        raise UsageError("--lr, --epochs and --selective-epochs must be non-negative")
    if bool(a.positives) != bool(a.negatives):
        raise UsageError("--positives and --negatives go together")
    try:
        if a.positives:
            pos = [read_image(p) for p in _expand_images([a.positives])]
            neg = [read_image(p) for p in _expand_images([a.negatives])]
            pos = [p if p.ndim == 2 else p.mean(axis=2) for p in pos]
            neg = [n if n.ndim == 2 else n.mean(axis=2) for n in neg]
            model, rows, summary = train_from_samples(pos, neg, cfg)
        else:
            model, rows, summary = train_cascade(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model.meta["train_summary"] = summary
    save_model(model, a.out)
    Path(str(a.out) + ".manifest.txt").write_text(manifest(model))
    if a.log:
        Path(a.log).write_text(write_csv([[r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}", f"{r[4]:.6f}", f"{r[5]:.3f}"]
                                          for r in rows], LOG_HEADER))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _detections_as_scored(recs):
    return [((float(r["x"]), float(r["y"]), float(r["w"]), float(r["h"])), float(r["score"])) for r in recs]


def cmd_eval(a) -> int:
    dets = parse_detections_jsonl(Path(a.detections).read_text())
    text = Path(a.annotations).read_text()
    anns = parse_fddb(text) if a.protocol == "fddb" else parse_rect_csv(text)
    joined, extra = join_by_image(anns, dets)
    for k in extra:
        print(f"warning: detections for unannotated image {k!r} excluded", file=sys.stderr)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scored = {k: (an, _detections_as_scored(d)) for k, (an, d) in joined.items()}
    roc, continuous = score_fddb(scored)
    (out / "roc.csv").write_text(write_csv([[f"{t:.6f}", fp, f"{tpr:.6f}", f"{c:.6f}"] for t, fp, tpr, c in roc],
                                           ROC_HEADER))
    p, r, f1 = score_prf1_images({k: (an, [rect for rect, _ in d]) for k, (an, d) in scored.items()},
                                 _matcher(a.protocol))
    summary = [[a.protocol, f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}", f"{continuous:.6f}"]]
    (out / "summary.csv").write_text(write_csv(summary, SUMMARY_HEADER))
    if a.protocol == "rect":
        sweep, mean_f1 = sweep_min_neighbors(joined)
        rows = [[m, f"{pp:.6f}", f"{rr:.6f}", f"{ff:.6f}"] for m, pp, rr, ff in sweep]
        rows.append(["mean", "", "", f"{mean_f1:.6f}"])
        (out / "f1_sweep.csv").write_text(write_csv(rows, ("min_neighbors", "precision", "recall", "f1")))
    return EXIT_OK


def _matcher(protocol: str):
    return match_discrete if protocol == "fddb" else match_rect_multiscale


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("size must look like 640x480") from exc
    return w, h


def cmd_bench(a) -> int:
    cfg = _config(a)
    model = _load(cfg.model)
    frames = []
    for p in _expand_images(cfg.inputs):
        if not p.is_file():
            raise UsageError(f"image not found: {p}")
        frames.append((p.name, read_image(p)))
    for n in a.synthetic or []:
        # one seed for every count so frames differ only in the planted faces
        sc = make_scene(*a.size, n, size_range=(max(cfg.params.min_size, 20), 48), seed=cfg.seed)
        frames.append((f"synthetic_{n}_faces", sc.image))
    if not frames:
        raise UsageError("no frames: pass images or --synthetic")
    configs = [(m, w) for m in a.modes for w in a.worker_counts]
    rows = bench(frames, model, cfg.params, configs, a.repeats)
    text = write_csv(rows, BENCH_HEADER)
    if cfg.output:
        Path(cfg.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pack_inspect(a) -> int:
    cfg = _config(a)
    raster = read_image(a.image)
    plane = raster if raster.ndim == 2 else raster.mean(axis=2)
    levels = build_pyramid(plane.astype(np.float32), STAGE1_WINDOW, cfg.params.min_size, cfg.params.scale_factor)
    packed = pack_fcnr(levels, a.strip_width, align=a.align)
    print(f"levels: {len(levels)}  strip: {packed.width}x{packed.height}  "
          f"stacked height: {sum(l.height for l in levels)}")
    used = int(np.count_nonzero(packed.ownership >= 0))
    print(f"fill: {used / max(packed.ownership.size, 1):.4f}")
    print("level  scale     x     y     w     h")
    for lvl, (x, y, w, h) in zip(levels, packed.placements):
        print(f"{lvl.index:5d}  {lvl.scale:.4f}  {x:4d}  {y:4d}  {w:4d}  {h:4d}")
    if cfg.output:
        write_image(cfg.output, packed.strip)
    return EXIT_OK


def cmd_synth(a) -> int:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(a.count):
        sc = make_scene(*a.size, a.faces, size_range=(a.face_min, a.face_max), seed=a.seed + k)
        name = f"scene_{k:04d}.pgm"
        write_image(out / name, sc.image)
        rows.extend([name, f"{x:.3f}", f"{y:.3f}", f"{w:.3f}", f"{h:.3f}"] for x, y, w, h in sc.boxes)
    (out / "annotations.csv").write_text(write_csv(rows, ("image", "x", "y", "w", "h")))
    return EXIT_OK


def cmd_manifest(a) -> int:
    sys.stdout.write(manifest(_load(a.model)))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _detector_flags(p: argparse.ArgumentParser) -> None:
    d = DetectorParams()
    p.add_argument("--min-size", type=float, default=d.min_size, help="smallest face width in pixels")
    p.add_argument("--scale-factor", type=float, default=d.scale_factor, help="pyramid step between levels")
    p.add_argument("--t1", type=float, default=d.t1, help="stage-1 response threshold")
    p.add_argument("--t2", type=float, default=d.t2, help="selective response threshold")
    p.add_argument("--tm", type=int, default=d.tm, help="response-count threshold")
    p.add_argument("--min-neighbors", type=int, default=d.min_neighbors, help="smallest cluster kept")
    p.add_argument("--rule", choices=RULES, default=d.rule)
    p.add_argument("--mode", choices=MODES, default=d.mode)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnncascade", description="Compact CNN cascade face detector.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect faces in images")
    p.add_argument("images", nargs="+")
    p.add_argument("--model", help=f"model file (default ${MODEL_ENV} or the bundled toy model)")
    p.add_argument("--out", help="detections JSONL (default stdout)")
    p.add_argument("--stats", help="per-image stage counts CSV")
    p.add_argument("--annotate-dir", help="write copies with detections drawn")
    _detector_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train a cascade on synthetic data or sample folders")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--positives", help="folder of face crops")
    p.add_argument("--negatives", help="folder of non-face crops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--selective-epochs", type=int, default=TrainConfig.selective_epochs)
    p.add_argument("--pool-mode", choices=("max", "mean"), default="max")
    p.add_argument("--quick", action="store_true", help="small sample budget for smoke runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score detections against annotations")
    p.add_argument("--detections", required=True, help="detections JSONL")
    p.add_argument("--annotations", required=True, help="FDDB ellipse list or rectangle CSV")
    p.add_argument("--protocol", choices=("fddb", "rect"), required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time execution modes")
    p.add_argument("images", nargs="*")
    p.add_argument("--model")
    p.add_argument("--out", help="bench CSV (default stdout)")
    p.add_argument("--modes", type=lambda s: s.split(","), default=["sync", "async"])
    p.add_argument("--worker-counts", type=lambda s: [int(v) for v in s.split(",")], default=[1])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--synthetic", type=lambda s: [int(v) for v in s.split(",")],
                   help="also bench synthetic frames with these face counts, e.g. 0,50")
    p.add_argument("--size", type=_parse_size, default=(640, 480), help="synthetic frame size")
    _detector_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("pack-inspect", help="show the patchwork packing of an image's pyramid")
    p.add_argument("image")
    p.add_argument("--strip-width", type=int)
    p.add_argument("--align", type=int, default=STAGE1_STRIDE)
    p.add_argument("--out", help="write the strip image")
    _detector_flags(p)
    p.set_defaults(func=cmd_pack_inspect)

    p = sub.add_parser("synth", help="write synthetic scenes and their rectangle annotations")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--faces", type=int, default=3)
    p.add_argument("--size", type=_parse_size, default=(320, 240))
    p.add_argument("--face-min", type=float, default=24)
    p.add_argument("--face-max", type=float, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("manifest", help="print parameter counts and map tallies of a model")
    p.add_argument("--model")
    p.set_defaults(func=cmd_manifest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        return a.func(a)
    except (UsageError, ParamsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, ImageFormatError, AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
