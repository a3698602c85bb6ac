#!/usr/bin/env python3
"""Train the fusion detector on synthetic data and report test accuracy.

Generates a seeded dataset, splits it 50/50, trains with an accuracy-based
early stop (probed on a test subset each epoch), and writes the model,
the loss log, and the final metric curve.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from earloc.cascade import detect_resized
from earloc.config import RunConfig
from earloc.data import SceneSpec, generate, split
from earloc.evaluate import curve, curve_csv, outcome
from earloc.train import train


def probe_stats(model, images, thr=0.5, score=0.05, nms=0.7):
    """Accuracy plus diagnostic means over a probe set."""
    outs = [outcome(im.source_id, im.gt, detect_resized(model, im.image, score, nms)) for im in images]
    acc = curve(outs, [thr]).rows[0].accuracy
    with_det = [o for o in outs if o.has_detection]
    mean_iou = float(np.mean([o.top_iou for o in with_det])) if with_det else 0.0
    mean_score = float(np.mean([o.top_score for o in with_det])) if with_det else 0.0
    return acc, mean_iou, mean_score, len(with_det) / len(outs)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr-initial", type=float, default=0.003)
    ap.add_argument("--lr-final", type=float, default=0.004)
    ap.add_argument("--lr-constant", action="store_true")
    ap.add_argument("--target", type=float, default=0.90, help="test accuracy@0.5 to stop at")
    ap.add_argument("--probe", type=int, default=250, help="test images probed per epoch")
    ap.add_argument("--score-threshold", type=float, default=0.05, help="detection score floor for eval")
    ap.add_argument("--out", type=Path, default=Path("runs/fusion"))
    args = ap.parse_args()

    t0 = time.time()
    spec = SceneSpec(seed=args.seed)
    images = [generate(spec, i) for i in range(args.count)]
    train_half, test_half = split(images, 0.5, seed=args.seed)
    print(
        f"generated {len(images)} images in {time.time() - t0:.0f}s; "
        f"train {len(train_half)} / test {len(test_half)}",
        flush=True,
    )

    cfg = RunConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_initial=args.lr_initial,
        lr_final=args.lr_final,
        lr_constant=args.lr_constant,
        seed=args.seed,
    )
    probe = test_half[: args.probe]

    def check(epoch, model):
        t = time.time()
        acc, miou, mscore, rate = probe_stats(model, probe, score=args.score_threshold)
        print(
            f"  epoch {epoch}: probe acc@0.5={acc:.3f} mean_iou={miou:.3f} "
            f"mean_score={mscore:.3f} det_rate={rate:.2f}  (eval {time.time() - t:.0f}s)",
            flush=True,
        )
        return acc >= args.target + 0.02  # margin over the probe before stopping

    args.out.mkdir(parents=True, exist_ok=True)
    result = train(
        cfg,
        train_half,
        args.out / "fusion.bin",
        args.out / "fusion_loss.csv",
        progress=lambda s: print(s, flush=True),
        on_epoch=check,
    )
    outs = [
        outcome(im.source_id, im.gt, detect_resized(result.model, im.image, args.score_threshold, cfg.nms_iou))
        for im in test_half
    ]
    c = curve(outs, [0.1 + 0.05 * k for k in range(17)])
    (args.out / "fusion_metrics.csv").write_text(curve_csv(c), encoding="utf-8")
    acc = next(r.accuracy for r in c.rows if abs(r.iou_threshold - 0.5) < 1e-9)
    print(f"final test-half accuracy@0.5 = {acc:.4f}  (total {time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
