"""Command-line interface.

Subcommands: ``gen`` (synthetic dataset), ``train`` / ``train-cascade``
(fit detectors), ``detect`` (boxes for one image), ``eval`` (metric CSVs
and optional SVG chart), ``gradcheck`` (finite-difference suite).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import NumericsError
from .cascade import CascadeConfig, detect_cascade, detect_resized
from .config import RunConfig
from .data import DataError, SceneSpec, generate, load_dataset, write_dataset
from .evaluate import curve, curve_csv, curve_svg, objectness_vs_iou_report, outcome, pairs_csv, report_csv
from .gradcheck import run_all
from .nets import ModelFormatError, load_model
from .train import loss_log_csv, train, train_cascade


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="earloc", description="Anchor-based ROI detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[], help="generate a synthetic dataset", add_help=True)
    g.add_argument("--count", type=int, required=True, help="number of images")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=320)
    g.add_argument("--occlusion-prob", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=6.0)
    g.add_argument("--illumination", type=float, default=0.35)
    g.add_argument("--distractors-min", type=int, default=2)
    g.add_argument("--distractors-max", type=int, default=6)
    g.add_argument("--scale-min", type=float, default=0.15)
    g.add_argument("--scale-max", type=float, default=0.35)

    t = sub.add_parser("train", help="train one detector")
    t.add_argument("--config", type=Path, required=True, help="flat key = value config file")
    t.add_argument("--data", type=Path, required=True, help="dataset manifest CSV")
    t.add_argument("--model-out", type=Path, required=True)
    t.add_argument("--log-out", type=Path, default=None, help="loss CSV (default: beside the model)")

    tc = sub.add_parser("train-cascade", help="train stage 1, derive crops, train stage 2")
    tc.add_argument("--config1", type=Path, required=True)
    tc.add_argument("--config2", type=Path, required=True)
    tc.add_argument("--data", type=Path, required=True)
    tc.add_argument("--out-dir", type=Path, required=True)
    tc.add_argument("--expansion", type=float, default=25.0)

    d = sub.add_parser("detect", help="print detections for one image")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", type=Path)
    src.add_argument("--cascade", nargs=2, type=Path, metavar=("STAGE1", "STAGE2"))
    d.add_argument("--image", type=Path, required=True)
    d.add_argument("--nms-iou", type=float, default=0.7)
    d.add_argument("--score-threshold", type=float, default=0.5)
    d.add_argument("--expansion", type=float, default=25.0)
    d.add_argument("--top-n", type=int, default=1)

    e = sub.add_parser("eval", help="run the evaluation protocol over a dataset")
    esrc = e.add_mutually_exclusive_group(required=True)
    esrc.add_argument("--model", type=Path)
    esrc.add_argument("--cascade", nargs=2, type=Path, metavar=("STAGE1", "STAGE2"))
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True, help="output directory for CSV/SVG")
    e.add_argument("--iou-from", type=float, default=0.1)
    e.add_argument("--iou-to", type=float, default=0.9)
    e.add_argument("--iou-step", type=float, default=0.05)
    e.add_argument("--nms-iou", type=float, default=0.7)
    e.add_argument("--score-threshold", type=float, default=0.5)
    e.add_argument("--expansion", type=float, default=25.0)
    e.add_argument("--top-n", type=int, default=1)
    e.add_argument(
        "--iou-comparator",
        choices=("gt", "ge"),
        default="gt",
        help="judge with IOU strictly greater than (gt) or at least (ge) the threshold",
    )
    e.add_argument("--plot", action="store_true", help="also write an SVG chart")

    sub.add_parser("gradcheck", help="finite-difference checks for all layers and losses")
    return p


def _cmd_gen(args) -> int:
    spec = SceneSpec(
        image_size=args.size,
        scale_range=(args.scale_min, args.scale_max),
        occlusion_prob=args.occlusion_prob,
        distractor_range=(args.distractors_min, args.distractors_max),
        illumination_strength=args.illumination,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    images = [generate(spec, i) for i in range(args.count)]
    manifest = write_dataset(images, args.out)
    print(f"wrote {len(images)} images under {args.out} (manifest: {manifest})")
    return 0


def _cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    images = load_dataset(args.data)
    if not images:
        raise DataError(f"{args.data}: dataset is empty")
    log_out = args.log_out or args.model_out.with_suffix(".loss.csv")
    result = train(cfg, images, args.model_out, log_out, progress=print)
    for i, v in enumerate(result.step_trace):
        print(f"step {i} loss {v!r}")
    print(f"saved final model to {result.model_path} (best epoch {result.best_epoch}: {result.best_path})")
    return 0


def _cmd_train_cascade(args) -> int:
    cfg1 = RunConfig.from_file(args.config1)
    cfg2 = RunConfig.from_file(args.config2)
    images = load_dataset(args.data)
    if not images:
        raise DataError(f"{args.data}: dataset is empty")
    result = train_cascade(cfg1, cfg2, images, args.out_dir, expansion=args.expansion, progress=print)
    print(
        f"stage-2 dataset: {result.stage2_dataset_size} crops ({len(result.skipped)} skipped); "
        f"models under {args.out_dir}"
    )
    return 0


def _load_image(path: Path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _detector(args):
    if args.model is not None:
        model = load_model(args.model)
        return lambda img: detect_resized(model, img, args.score_threshold, args.nms_iou)
    s1, s2 = (load_model(p) for p in args.cascade)
    cfg = CascadeConfig(
        s1,
        s2,
        expansion_pixels=args.expansion,
        top_n=args.top_n,
        score_threshold=args.score_threshold,
        nms_iou=args.nms_iou,
    )
    return lambda img: detect_cascade(cfg, img)


def _cmd_detect(args) -> int:
    detect = _detector(args)
    for d in detect(_load_image(args.image)):
        b = d.box
        print(f"{b.x_min:.2f} {b.y_min:.2f} {b.x_max:.2f} {b.y_max:.2f} {d.score:.4f}")
    return 0


def _cmd_eval(args) -> int:
    detect = _detector(args)
    images = load_dataset(args.data)
    if not images:
        raise DataError(f"{args.data}: dataset is empty")
    if args.iou_step <= 0 or args.iou_to < args.iou_from:
        raise UsageError("need --iou-step > 0 and --iou-to >= --iou-from")
    count = int(np.floor((args.iou_to - args.iou_from) / args.iou_step + 1e-9)) + 1
    thresholds = [args.iou_from + k * args.iou_step for k in range(count)]
    outcomes = [outcome(img.source_id, img.gt, detect(img.image)) for img in images]
    c = curve(outcomes, thresholds, strict=args.iou_comparator == "gt")
    rep = objectness_vs_iou_report(outcomes, thresholds)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(curve_csv(c), encoding="utf-8")
    (out / "score_vs_iou.csv").write_text(report_csv(rep), encoding="utf-8")
    (out / "score_iou_pairs.csv").write_text(pairs_csv(rep), encoding="utf-8")
    written = ["metrics.csv", "score_vs_iou.csv", "score_iou_pairs.csv"]
    if args.plot:
        (out / "metrics.svg").write_text(curve_svg(c), encoding="utf-8")
        written.append("metrics.svg")
    mid = c.rows[len(c.rows) // 2]
    print(f"evaluated {len(images)} images; accuracy@{mid.iou_threshold:.2f} = {mid.accuracy:.4f}")
    print(f"wrote {', '.join(written)} under {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_all()
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  tol={r.tolerance:.0e}  {status}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 3


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "train-cascade": _cmd_train_cascade,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ModelFormatError, OSError) as exc:
        # before ValueError: ModelFormatError is a ValueError subclass
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
