"""Two-stage detection: detect, expand, crop, re-detect, map back.

Stage 1 runs on the (resized) full image; its top detections are grown by
a context margin, cropped, and re-detected by stage 2 at higher effective
resolution. Stage-2 boxes are mapped back through the recorded affine
crop transform. ``build_stage2_dataset`` derives stage-2 training crops
from a trained stage-1 model, re-expressing ground truth in crop
coordinates and dropping samples whose ground truth the crop mostly lost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box, Detection, clip_box, iou, nms
from .data import AnnotatedImage, image_to_input, resample_region
from .nets import infer


@dataclass(frozen=True)
class CropTransform:
    """Affine map between a source rectangle and a resized crop."""

    src: Box
    out_w: int
    out_h: int

    @property
    def sx(self) -> float:
        return self.out_w / self.src.width

    @property
    def sy(self) -> float:
        return self.out_h / self.src.height

    def map_forward(self, box: Box) -> Box:
        return Box(
            (box.x_min - self.src.x_min) * self.sx,
            (box.y_min - self.src.y_min) * self.sy,
            (box.x_max - self.src.x_min) * self.sx,
            (box.y_max - self.src.y_min) * self.sy,
        )

    def map_back(self, box: Box) -> Box:
        return Box(
            box.x_min / self.sx + self.src.x_min,
            box.y_min / self.sy + self.src.y_min,
            box.x_max / self.sx + self.src.x_min,
            box.y_max / self.sy + self.src.y_min,
        )


@dataclass
class CascadeConfig:
    """Two frozen stage models plus crop/selection knobs."""

    stage1: object
    stage2: object
    expansion_pixels: float = 50.0
    top_n: int = 1
    score_threshold: float = 0.5
    nms_iou: float = 0.7

    def __post_init__(self):
        if self.expansion_pixels < 0:
            raise ValueError("expansion_pixels must be >= 0")
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")


def expand_and_crop(image: np.ndarray, det_box: Box, expansion: float, out_size: int):
    """Grow a box by ``expansion`` per side, clamp, crop, and resize.

    Returns (uint8 crop of out_size x out_size, CropTransform). Raises
    ValueError when the grown box misses the image entirely.
    """
    h, w = image.shape
    x0 = max(0.0, det_box.x_min - expansion)
    y0 = max(0.0, det_box.y_min - expansion)
    x1 = min(float(w), det_box.x_max + expansion)
    y1 = min(float(h), det_box.y_max + expansion)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {det_box} does not intersect the {w}x{h} image after clamping")
    src = Box(x0, y0, x1, y1)
    vals = resample_region(image, src, out_size, out_size)
    crop = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return crop, CropTransform(src, out_size, out_size)


def detect_resized(model, image: np.ndarray, score_threshold: float = 0.5, nms_iou: float = 0.7) -> list[Detection]:
    """Run a fixed-input-size model on an arbitrary-size image.

    The whole frame is resampled to the model input and detections are
    mapped back to original-image coordinates.
    """
    h, w = image.shape
    crop, tf = expand_and_crop(image, Box(0.0, 0.0, float(w), float(h)), 0.0, model.input_size)
    dets = infer(model, image_to_input(crop), score_threshold, nms_iou)
    return [Detection(clip_box(tf.map_back(d.box), w, h), d.score, d.source_level) for d in dets]


def detect_cascade(cfg: CascadeConfig, image: np.ndarray) -> list[Detection]:
    """Stage-1 detect, crop around the top boxes, stage-2 refine, pool, NMS.

    Empty stage-1 output yields an empty result. If stage 2 finds nothing
    in any crop, the stage-1 detections are returned unchanged so the
    cascade never silently discards a localization it already had.
    """
    h, w = image.shape
    stage1 = detect_resized(cfg.stage1, image, cfg.score_threshold, cfg.nms_iou)
    if not stage1:
        return []
    pooled: list[Detection] = []
    for det in stage1[: cfg.top_n]:
        crop, tf = expand_and_crop(image, det.box, cfg.expansion_pixels, cfg.stage2.input_size)
        for d in infer(cfg.stage2, image_to_input(crop), cfg.score_threshold, cfg.nms_iou):
            pooled.append(Detection(clip_box(tf.map_back(d.box), w, h), d.score, f"cascade:{d.source_level}"))
    if not pooled:
        return stage1[: cfg.top_n]
    return nms(pooled, cfg.nms_iou)


def build_stage2_dataset(
    stage1,
    images: list[AnnotatedImage],
    *,
    expansion: float,
    out_size: int,
    score_threshold: float = 0.5,
    nms_iou: float = 0.7,
    retention_threshold: float = 0.25,
) -> tuple[list[AnnotatedImage], list[str]]:
    """Derive stage-2 training crops from stage-1 detections.

    Each image's top detection is expanded and cropped; the ground truth is
    intersected with the crop window and mapped into crop coordinates.
    Samples keeping less than ``retention_threshold`` of the original
    ground truth (by IOU of the clipped box against the original) are
    dropped. Returns (derived samples, skip log).
    """
    derived: list[AnnotatedImage] = []
    skipped: list[str] = []
    for img in images:
        dets = detect_resized(stage1, img.image, score_threshold, nms_iou)
        if not dets:
            skipped.append(f"{img.source_id}: no stage-1 detection")
            continue
        crop, tf = expand_and_crop(img.image, dets[0].box, expansion, out_size)
        gt = img.gt
        ix0, iy0 = max(gt.x_min, tf.src.x_min), max(gt.y_min, tf.src.y_min)
        ix1, iy1 = min(gt.x_max, tf.src.x_max), min(gt.y_max, tf.src.y_max)
        if ix1 <= ix0 or iy1 <= iy0:
            skipped.append(f"{img.source_id}: ground truth outside crop")
            continue
        visible = Box(ix0, iy0, ix1, iy1)
        if iou(visible, gt) < retention_threshold:
            skipped.append(f"{img.source_id}: ground truth mostly lost ({iou(visible, gt):.3f})")
            continue
        gt2 = clip_box(tf.map_forward(visible), out_size, out_size)
        derived.append(AnnotatedImage(crop, gt2, f"{img.source_id}-crop"))
    return derived, skipped
