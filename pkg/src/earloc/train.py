"""Training loops: single-detector SGD and the two-stage pipeline.

Matching is precomputed per image (it depends only on boxes, not
parameters); batches are seeded shuffles, the loss is the mean of
per-image losses, and everything is bit-deterministic for a fixed config
and dataset. A non-finite loss or gradient aborts with the failing step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .boxes import Box
from .cascade import build_stage2_dataset
from .config import RunConfig
from .data import AnnotatedImage, image_to_input, resize_image
from .matching import MatchResult, loss_fusion, loss_multibox, match
from .nets import save_model


@dataclass
class EpochRow:
    epoch: int
    cls: float
    reg: float
    total: float


@dataclass
class TrainResult:
    model: object
    epoch_rows: list[EpochRow]
    step_trace: list[float]
    best_epoch: int
    model_path: Path | None = None
    best_path: Path | None = None


def loss_log_csv(rows: list[EpochRow]) -> str:
    lines = ["epoch,cls,reg,total"]
    for r in rows:
        lines.append(f"{r.epoch},{r.cls:.6f},{r.reg:.6f},{r.total:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class _Sample:
    pixels: np.ndarray  # uint8 [S, S] at model input size
    matches: dict[str, MatchResult]


def _prepare(cfg: RunConfig, model, images: list[AnnotatedImage]) -> list[_Sample]:
    size = cfg.input_size
    anchor_arrays = {lvl.level: model.anchors(lvl.level)[1] for lvl in model.anchor_levels()}
    samples = []
    for img in images:
        h, w = img.image.shape
        if (h, w) == (size, size):
            pixels, gt = img.image, img.gt
        else:
            pixels = resize_image(img.image, size, size)
            sx, sy = size / w, size / h
            gt = Box(img.gt.x_min * sx, img.gt.y_min * sy, img.gt.x_max * sx, img.gt.y_max * sy)
        matches = {lvl: match(arr, [gt], cfg.match_iou) for lvl, arr in anchor_arrays.items()}
        samples.append(_Sample(pixels, matches))
    return samples


def train(
    cfg: RunConfig,
    images: list[AnnotatedImage],
    model_out: Path | str | None = None,
    log_out: Path | str | None = None,
    progress=None,
    on_epoch=None,
) -> TrainResult:
    """SGD-train a detector on annotated images; returns the trained model.

    ``model_out`` receives the final weights, with the best-epoch weights
    beside it under a ``.best`` suffix; ``log_out`` receives the per-epoch
    loss CSV. ``progress`` is an optional callable fed one line per epoch.
    ``on_epoch(epoch, model)``, if given, runs after each epoch; returning
    a truthy value stops training early (e.g. an accuracy target was met).
    """
    if not images:
        raise ValueError("training set is empty")
    model = cfg.build_model()
    samples = _prepare(cfg, model, images)
    weights = cfg.loss_weights()
    loss_fn = loss_fusion if cfg.model_kind == "fusion" else loss_multibox
    level_sizes = {lvl: len(s.labels) for lvl, s in samples[0].matches.items()}
    opt = ad.SGD(model.params, lr=cfg.lr_initial, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    trace: list[float] = []
    rows: list[EpochRow] = []
    best_total = np.inf
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    gstep = 0
    n = len(samples)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = np.random.default_rng((cfg.seed, 1000 + epoch)).permutation(n)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x = Tensor(np.stack([image_to_input(samples[i].pixels) for i in batch]))
            rows_by_level = model.head_rows(x)
            totals = []
            cls_sum = reg_sum = 0.0
            for bi, i in enumerate(batch):
                per_level = {
                    lvl: (
                        ad.slice_axis(cls_rows, 0, bi * level_sizes[lvl], (bi + 1) * level_sizes[lvl]),
                        ad.slice_axis(reg_rows, 0, bi * level_sizes[lvl], (bi + 1) * level_sizes[lvl]),
                    )
                    for lvl, (cls_rows, reg_rows) in rows_by_level.items()
                }
                lb = loss_fn(per_level, samples[i].matches, weights)
                totals.append(lb.total)
                cls_sum += lb.cls_component
                reg_sum += lb.reg_component
            batch_total = totals[0]
            for t in totals[1:]:
                batch_total = ad.add(batch_total, t)
            batch_total = ad.scale(batch_total, 1.0 / len(batch))
            value = float(batch_total.data)
            if not np.isfinite(value):
                raise NumericsError(f"non-finite loss at step {gstep} (epoch {epoch})")
            if gstep < cfg.trace_steps:
                trace.append(value)
            opt.zero_grad()
            batch_total.backward()
            try:
                opt.step()
            except NumericsError as exc:
                raise NumericsError(f"step {gstep} (epoch {epoch}): {exc}") from exc
            sums += (cls_sum / len(batch), reg_sum / len(batch), value)
            steps += 1
            gstep += 1
        row = EpochRow(epoch, sums[0] / steps, sums[1] / steps, sums[2] / steps)
        rows.append(row)
        if progress is not None:
            progress(f"epoch {epoch}: cls={row.cls:.4f} reg={row.reg:.4f} total={row.total:.4f} lr={opt.lr:.5f}")
        if row.total < best_total:
            best_total = row.total
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in model.params.items()}
        if on_epoch is not None and on_epoch(epoch, model):
            break

    result = TrainResult(model, rows, trace, best_epoch)
    if log_out is not None:
        Path(log_out).write_text(loss_log_csv(rows), encoding="utf-8")
    if model_out is not None:
        model_out = Path(model_out)
        save_model(model, model_out)
        result.model_path = model_out
        if best_state is not None:
            current = {name: p.data for name, p in model.params.items()}
            for name, p in model.params.items():
                p.data = best_state[name]
            best_path = model_out.with_suffix(".best" + model_out.suffix)
            save_model(model, best_path)
            for name, p in model.params.items():
                p.data = current[name]
            result.best_path = best_path
    return result


@dataclass
class CascadeTrainResult:
    stage1: TrainResult
    stage2: TrainResult
    stage2_dataset_size: int
    skipped: list[str] = field(default_factory=list)


def train_cascade(
    cfg1: RunConfig,
    cfg2: RunConfig,
    images: list[AnnotatedImage],
    out_dir: Path | str,
    expansion: float = 25.0,
    retention_threshold: float = 0.25,
    progress=None,
) -> CascadeTrainResult:
    """Train stage 1, derive stage-2 crops from it, then train stage 2."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r1 = train(cfg1, images, out / "stage1.bin", out / "stage1_loss.csv", progress)
    derived, skipped = build_stage2_dataset(
        r1.model,
        images,
        expansion=expansion,
        out_size=cfg2.input_size,
        score_threshold=cfg1.score_threshold,
        nms_iou=cfg1.nms_iou,
        retention_threshold=retention_threshold,
    )
    if not derived:
        raise ValueError("stage-1 model produced no usable stage-2 training crops")
    r2 = train(cfg2, derived, out / "stage2.bin", out / "stage2_loss.csv", progress)
    return CascadeTrainResult(r1, r2, len(derived), skipped)
