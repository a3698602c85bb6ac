#!/usr/bin/env python3
"""Train a two-stage detector and compare it against its first stage.

Stage 1 is a multi-set detector on the resized full frame; stage 2 is the
same topology retrained on context-expanded crops around stage-1's top
detection. Reports mean top-detection IOU and accuracy at a strict IOU
threshold for both, on the held-out half.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from earloc.cascade import CascadeConfig, build_stage2_dataset, detect_cascade, detect_resized
from earloc.config import RunConfig
from earloc.data import SceneSpec, generate, split
from earloc.evaluate import curve, outcome
from earloc.train import train


def stage1_outcomes(model, images, score, nms):
    return [outcome(im.source_id, im.gt, detect_resized(model, im.image, score, nms)) for im in images]


def cascade_outcomes(cfg, images):
    return [outcome(im.source_id, im.gt, detect_cascade(cfg, im.image)) for im in images]


def summarize(tag, outs, acc_iou):
    miou = float(np.mean([o.top_iou for o in outs]))
    acc = curve(outs, [acc_iou]).rows[0].accuracy
    rate = sum(o.has_detection for o in outs) / len(outs)
    print(f"{tag}: mean_top_iou={miou:.4f} accuracy@{acc_iou}={acc:.4f} det_rate={rate:.2f}", flush=True)
    return miou, acc


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs1", type=int, default=12)
    ap.add_argument("--epochs2", type=int, default=12)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--expansion", type=float, default=25.0)
    ap.add_argument("--probe", type=int, default=100, help="test images probed per epoch")
    ap.add_argument("--score-threshold", type=float, default=0.05)
    ap.add_argument("--acc-iou", type=float, default=0.8)
    ap.add_argument("--target", type=float, default=None, help="stage-1 probe mean-IOU early stop")
    ap.add_argument("--out", type=Path, default=Path("runs/cascade"))
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

    base = dict(
        model_kind="multibox",
        input_size=160,
        batch_size=args.batch_size,
        lr_initial=args.lr,
        lr_constant=True,
        seed=args.seed,
        score_threshold=args.score_threshold,
    )
    cfg1 = RunConfig(**base, epochs=args.epochs1)
    cfg2 = RunConfig(**base, epochs=args.epochs2)
    probe = test_half[: args.probe]

    def check(epoch, model):
        t = time.time()
        outs = stage1_outcomes(model, probe, args.score_threshold, cfg1.nms_iou)
        miou = float(np.mean([o.top_iou for o in outs]))
        acc5 = curve(outs, [0.5]).rows[0].accuracy
        print(
            f"  epoch {epoch}: probe mean_iou={miou:.3f} acc@0.5={acc5:.3f}  (eval {time.time() - t:.0f}s)",
            flush=True,
        )
        return args.target is not None and miou >= args.target

    args.out.mkdir(parents=True, exist_ok=True)
    r1 = train(
        cfg1,
        train_half,
        args.out / "stage1.bin",
        args.out / "stage1_loss.csv",
        progress=lambda s: print(s, flush=True),
        on_epoch=check,
    )
    t1 = time.time()
    print(f"stage 1 trained in {t1 - t0:.0f}s", flush=True)

    derived, skipped = build_stage2_dataset(
        r1.model,
        train_half,
        expansion=args.expansion,
        out_size=cfg2.input_size,
        score_threshold=args.score_threshold,
        nms_iou=cfg1.nms_iou,
    )
    print(f"stage-2 dataset: {len(derived)} crops, {len(skipped)} skipped", flush=True)
    r2 = train(
        cfg2,
        derived,
        args.out / "stage2.bin",
        args.out / "stage2_loss.csv",
        progress=lambda s: print(s, flush=True),
    )
    print(f"stage 2 trained in {time.time() - t1:.0f}s", flush=True)

    s1_outs = stage1_outcomes(r1.model, test_half, args.score_threshold, cfg1.nms_iou)
    m1, a1 = summarize("stage-1 alone", s1_outs, args.acc_iou)
    cas = CascadeConfig(
        r1.model,
        r2.model,
        expansion_pixels=args.expansion,
        top_n=1,
        score_threshold=args.score_threshold,
        nms_iou=cfg1.nms_iou,
    )
    c_outs = cascade_outcomes(cas, test_half)
    m2, a2 = summarize("cascade", c_outs, args.acc_iou)
    print(
        f"delta: mean_top_iou {m2 - m1:+.4f}, accuracy@{args.acc_iou} {a2 - a1:+.4f}  "
        f"(total {time.time() - t0:.0f}s)"
    )


if __name__ == "__main__":
    main()
