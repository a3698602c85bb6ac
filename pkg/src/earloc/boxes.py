"""Box algebra: IOU, anchor grids, offset encoding, and greedy NMS.

Coordinate convention: continuous pixels, origin at the top-left corner,
boxes as (x_min, y_min, x_max, y_max) with area (x_max-x_min)*(y_max-y_min).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class InvalidBoxError(ValueError):
    """Raised for degenerate (non-positive area) boxes."""


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidBoxError(f"degenerate box {self!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_center(self) -> "CenterBox":
        return CenterBox(
            c_x=0.5 * (self.x_min + self.x_max),
            c_y=0.5 * (self.y_min + self.y_max),
            w=self.width,
            h=self.height,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass(frozen=True)
class CenterBox:
    c_x: float
    c_y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"degenerate center box {self!r}")

    def to_box(self) -> Box:
        return Box(
            x_min=self.c_x - 0.5 * self.w,
            y_min=self.c_y - 0.5 * self.h,
            x_max=self.c_x + 0.5 * self.w,
            y_max=self.c_y + 0.5 * self.h,
        )


@dataclass(frozen=True)
class Anchor:
    box: Box
    level: str
    cell: tuple[int, int]  # (row, col)
    slot: int


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    source_level: str = ""

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 when interiors do not overlap."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between (N,4) and (M,4) arrays of (x0,y0,x1,y1) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


@dataclass(frozen=True)
class AnchorLevelConfig:
    """One detection level: a stride-tiled grid of K = len(scales)*len(ratios) anchors."""

    level: str
    stride: float
    scales: tuple[float, ...]
    ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.scales or not self.ratios:
            raise ValueError("scales and ratios must be non-empty")

    @property
    def num_slots(self) -> int:
        return len(self.scales) * len(self.ratios)

    def slot_sizes(self) -> list[tuple[float, float]]:
        """(w, h) per slot; ratio r is applied area-preservingly: w = s*sqrt(r), h = s/sqrt(r)."""
        return [
            (s * math.sqrt(r), s / math.sqrt(r))
            for s in self.scales
            for r in self.ratios
        ]


def grid_shape(image_w: float, image_h: float, stride: float) -> tuple[int, int]:
    # rounding guards float error for fractional strides that tile evenly
    return int(round(image_h / stride)), int(round(image_w / stride))


def generate_anchors(image_w: float, image_h: float, cfg: AnchorLevelConfig) -> list[Anchor]:
    """One anchor per (cell, scale, ratio), centered on (cell + 0.5) * stride.

    Anchors may extend past the image bounds; their centers never do.
    """
    rows, cols = grid_shape(image_w, image_h, cfg.stride)
    sizes = cfg.slot_sizes()
    anchors = []
    for r in range(rows):
        cy = (r + 0.5) * cfg.stride
        for c in range(cols):
            cx = (c + 0.5) * cfg.stride
            assert 0 <= cx < image_w and 0 <= cy < image_h, "anchor center out of bounds"
            for k, (w, h) in enumerate(sizes):
                anchors.append(
                    Anchor(box=CenterBox(cx, cy, w, h).to_box(), level=cfg.level, cell=(r, c), slot=k)
                )
    return anchors


def anchor_array(anchors: list[Anchor]) -> np.ndarray:
    """(N,4) float64 corner array in the anchors' list order."""
    return np.array([a.box.as_array() for a in anchors], dtype=np.float64).reshape(-1, 4)


def encode(gt: Box, anchor: Box) -> np.ndarray:
    """Offsets (t_x, t_y, t_w, t_h) of a ground-truth box relative to an anchor.

    t_x = (g_cx - a_cx) / a_w, t_y = (g_cy - a_cy) / a_h,
    t_w = ln(g_w / a_w),       t_h = ln(g_h / a_h).
    """
    g, a = gt.to_center(), anchor.to_center()
    return np.array(
        [
            (g.c_x - a.c_x) / a.w,
            (g.c_y - a.c_y) / a.h,
            math.log(g.w / a.w),
            math.log(g.h / a.h),
        ],
        dtype=np.float64,
    )


def decode(offsets: np.ndarray, anchor: Box, clamp_to: tuple[float, float] | None = None) -> Box:
    """Invert `encode`. `clamp_to=(image_w, image_h)` clips the result to image bounds."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if not np.all(np.isfinite(offsets)):
        raise ValueError(f"non-finite offsets {offsets}")
    a = anchor.to_center()
    cb = CenterBox(
        c_x=a.c_x + offsets[0] * a.w,
        c_y=a.c_y + offsets[1] * a.h,
        w=a.w * math.exp(offsets[2]),
        h=a.h * math.exp(offsets[3]),
    )
    box = cb.to_box()
    if clamp_to is not None:
        box = clip_box(box, clamp_to[0], clamp_to[1])
    return box


def clip_box(box: Box, image_w: float, image_h: float) -> Box:
    """Clip to image bounds, nudging degenerate results to a minimal sliver."""
    eps = 1e-3
    x0 = min(max(box.x_min, 0.0), image_w - eps)
    y0 = min(max(box.y_min, 0.0), image_h - eps)
    x1 = max(min(box.x_max, image_w), x0 + eps)
    y1 = max(min(box.y_max, image_h), y0 + eps)
    return Box(x0, y0, x1, y1)


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized `encode` over matching (N,4) corner arrays."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    gcx, gcy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    acx, acy = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_array(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized `decode` over matching (N,4) arrays; no clamping."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    acx, acy = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    cx = acx + offsets[:, 0] * aw
    cy = acy + offsets[:, 1] * ah
    w = aw * np.exp(offsets[:, 2])
    h = ah * np.exp(offsets[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Sort by score descending (ties keep input order), repeatedly take the top
    box and drop every remaining box whose IOU with it exceeds the threshold.
    """
    if not detections:
        return []
    boxes = np.array([d.box.as_array() for d in detections])
    scores = np.array([d.score for d in detections])
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ious <= iou_threshold]
    return [detections[i] for i in keep]
