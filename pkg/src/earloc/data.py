"""Seeded synthetic scenes, annotation files, and box-aware augmentation.

Each generated image contains exactly one target — an anti-aliased ellipse
with an inner crescent ridge that distractor shapes (plain ellipses and
rectangles) lack — over a cluttered grayscale background with an
illumination gradient and Gaussian noise, optionally part-occluded by a
bar. The ground-truth box is the tight bound of the pre-occlusion target
mask. Generation is a pure function of (spec, index).

Augmentations: horizontal flip (exact involution), rotation about the
image center with mask-derived box recomputation, and Gaussian blur
(box unchanged).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import Box, InvalidBoxError

MANIFEST_FIELDS = ("relative_path", "x_min", "y_min", "x_max", "y_max")
ROTATION_LIMIT_DEG = 30.0
BLUR_SIGMA_LIMIT = 3.0


class DataError(Exception):
    """Raised for unreadable or invalid dataset inputs."""


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for the synthetic scene generator."""

    image_size: int = 320
    scale_range: tuple[float, float] = (0.15, 0.35)
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    occlusion_prob: float = 0.3
    occlusion_max_frac: float = 0.4
    distractor_range: tuple[int, int] = (2, 6)
    illumination_strength: float = 0.35
    noise_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size too small: {self.image_size}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi < 1):
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f"inverted rotation_range {self.rotation_range}")
        if not (0 <= self.occlusion_prob <= 1):
            raise ValueError(f"occlusion_prob outside [0,1]: {self.occlusion_prob}")
        if not (0 < self.occlusion_max_frac < 1):
            raise ValueError(f"occlusion_max_frac outside (0,1): {self.occlusion_max_frac}")
        if self.distractor_range[0] > self.distractor_range[1] or self.distractor_range[0] < 0:
            raise ValueError(f"invalid distractor_range {self.distractor_range}")
        if self.noise_sigma < 0 or self.illumination_strength < 0:
            raise ValueError("noise and illumination strengths must be non-negative")


@dataclass(eq=False)
class AnnotatedImage:
    """8-bit grayscale image with its single ground-truth box.

    ``mask`` is the rendered target's boolean coverage mask when the image
    came from the generator; images loaded from disk carry ``mask=None``.
    """

    image: np.ndarray
    gt: Box
    source_id: str
    mask: np.ndarray | None = None


def _rotated_coords(xx, yy, cx, cy, theta_deg):
    t = math.radians(theta_deg)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return u, v


def _patch_grid(cx, cy, rx, ry, size):
    """Integer patch bounds (x0, y0, x1, y1) around a shape, clipped to the image."""
    x0 = max(0, int(math.floor(cx - rx)) - 2)
    y0 = max(0, int(math.floor(cy - ry)) - 2)
    x1 = min(size, int(math.ceil(cx + rx)) + 2)
    y1 = min(size, int(math.ceil(cy + ry)) + 2)
    return x0, y0, x1, y1


def _subpixel_centers(lo, hi, ss):
    base = np.arange(lo, hi, dtype=np.float64)
    offs = (np.arange(ss, dtype=np.float64) + 0.5) / ss
    return (base[:, None] + offs[None, :]).reshape(-1)


def _draw_distractor(canvas, rng, size):
    shape = rng.choice(("ellipse", "rect"))
    rx = rng.uniform(0.04, 0.15) * size
    ry = rx * rng.uniform(0.5, 1.0)
    theta = rng.uniform(0.0, 180.0)
    cx = rng.uniform(rx, size - rx)
    cy = rng.uniform(ry, size - ry)
    shade = float(np.clip(canvas.mean() + rng.choice((-1.0, 1.0)) * rng.uniform(25, 80), 5, 250))
    r = max(rx, ry)
    x0, y0, x1, y1 = _patch_grid(cx, cy, r, r, size)
    if x1 <= x0 or y1 <= y0:
        return
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    xx, yy = np.meshgrid(xs, ys)
    u, v = _rotated_coords(xx, yy, cx, cy, theta)
    if shape == "ellipse":
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    else:
        inside = (np.abs(u) <= rx) & (np.abs(v) <= ry)
    canvas[y0:y1, x0:x1][inside] = shade


def _render_target(canvas, rng, spec):
    """Draws the anti-aliased target; returns its boolean coverage mask."""
    size = spec.image_size
    frac = rng.uniform(*spec.scale_range)
    a = frac * size / 2.0
    b = a * rng.uniform(0.55, 0.8)
    theta = rng.uniform(*spec.rotation_range)
    margin = a + 2.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    base = float(canvas.mean())
    sign = float(rng.choice((-1.0, 1.0)))
    shade = float(np.clip(base + sign * rng.uniform(45, 90), 10, 245))
    ridge = float(np.clip(shade - sign * 55, 5, 250))
    # inner crescent = a scaled copy of the ellipse minus a shifted copy
    inner_f = 0.62
    shift = 0.45 * a * inner_f

    ss = 4
    x0, y0, x1, y1 = _patch_grid(cx, cy, a, a, size)
    xs = _subpixel_centers(x0, x1, ss)
    ys = _subpixel_centers(y0, y1, ss)
    xx, yy = np.meshgrid(xs, ys)
    u, v = _rotated_coords(xx, yy, cx, cy, theta)
    in_outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    ia, ib = inner_f * a, inner_f * b
    in_inner = (u / ia) ** 2 + (v / ib) ** 2 <= 1.0
    in_shifted = ((u - shift) / ia) ** 2 + (v / ib) ** 2 <= 1.0
    in_crescent = in_inner & ~in_shifted
    sub_vals = np.where(in_crescent, ridge, shade)

    ph, pw = y1 - y0, x1 - x0
    in_outer4 = in_outer.reshape(ph, ss, pw, ss)
    vals4 = (sub_vals * in_outer).reshape(ph, ss, pw, ss)
    coverage = in_outer4.mean(axis=(1, 3))
    weighted = vals4.mean(axis=(1, 3))
    region = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = region * (1.0 - coverage) + weighted

    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y1, x0:x1] = coverage >= 0.5
    return mask


def _apply_occlusion(canvas, rng, mask, max_frac):
    """Overwrites a bar across the target covering at most max_frac of it."""
    ys, xs = np.nonzero(mask)
    target_px = ys.size
    horizontal = bool(rng.random() < 0.5)
    lo, hi = (ys.min(), ys.max()) if horizontal else (xs.min(), xs.max())
    extent = hi - lo + 1
    thickness = max(2, int(rng.uniform(0.1, 0.3) * extent))
    center = rng.uniform(lo + 0.25 * extent, lo + 0.75 * extent)
    shade = float(rng.choice((rng.uniform(15, 55), rng.uniform(185, 235))))
    for _ in range(8):
        b0 = max(0, int(round(center - thickness / 2)))
        b1 = min(canvas.shape[0] if horizontal else canvas.shape[1], b0 + thickness)
        bar = np.zeros_like(mask)
        if horizontal:
            bar[b0:b1, :] = True
        else:
            bar[:, b0:b1] = True
        covered = np.count_nonzero(bar & mask) / target_px
        if covered <= max_frac:
            canvas[bar] = shade
            return
        thickness = max(2, int(thickness * 0.7))
        if thickness == 2 and covered > max_frac:
            break


def generate(spec: SceneSpec, index: int) -> AnnotatedImage:
    """Renders scene ``index`` of the stream defined by ``spec``."""
    size = spec.image_size
    rng = np.random.default_rng((spec.seed, index))
    canvas = np.full((size, size), rng.uniform(50, 110), dtype=np.float64)
    for _ in range(int(rng.integers(spec.distractor_range[0], spec.distractor_range[1] + 1))):
        _draw_distractor(canvas, rng, size)
    mask = _render_target(canvas, rng, spec)
    if rng.random() < spec.occlusion_prob:
        _apply_occlusion(canvas, rng, mask, spec.occlusion_max_frac)
    if spec.illumination_strength > 0:
        phi = rng.uniform(0, 2 * math.pi)
        xs = (np.arange(size) + 0.5) / size - 0.5
        proj = math.cos(phi) * xs[None, :] + math.sin(phi) * xs[:, None]
        canvas *= 1.0 + spec.illumination_strength * proj
    if spec.noise_sigma > 0:
        canvas += rng.normal(0.0, spec.noise_sigma, canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    gt = mask_bounds(mask)
    return AnnotatedImage(image=image, gt=gt, source_id=f"synth-{spec.seed}-{index:05d}", mask=mask)


def mask_bounds(mask: np.ndarray) -> Box:
    """Tight box around a boolean mask's true pixels (pixel (i,j) spans [j,j+1)x[i,i+1))."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise InvalidBoxError("empty mask has no bounding box")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


# ---------------------------------------------------------------------------
# augmentation


def hflip(img: AnnotatedImage) -> AnnotatedImage:
    w = img.image.shape[1]
    gt = Box(w - img.gt.x_max, img.gt.y_min, w - img.gt.x_min, img.gt.y_max)
    mask = img.mask[:, ::-1].copy() if img.mask is not None else None
    return AnnotatedImage(img.image[:, ::-1].copy(), gt, img.source_id + "-hflip", mask)


def _target_mask(img: AnnotatedImage) -> np.ndarray:
    if img.mask is not None:
        return img.mask
    m = np.zeros(img.image.shape, dtype=bool)
    m[int(img.gt.y_min) : int(math.ceil(img.gt.y_max)), int(img.gt.x_min) : int(math.ceil(img.gt.x_max))] = True
    return m


def rotate(img: AnnotatedImage, angle_deg: float) -> AnnotatedImage:
    """Rotate about the image center; the box is recomputed from the rotated mask."""
    if not (-ROTATION_LIMIT_DEG <= angle_deg <= ROTATION_LIMIT_DEG):
        raise ValueError(f"rotation angle {angle_deg} outside ±{ROTATION_LIMIT_DEG}°")
    rot_img = ndimage.rotate(img.image.astype(np.float32), angle_deg, reshape=False, order=1, mode="nearest")
    image = np.clip(np.rint(rot_img), 0, 255).astype(np.uint8)
    rot_mask = (
        ndimage.rotate(
            _target_mask(img).astype(np.float32), angle_deg, reshape=False, order=1, mode="constant", cval=0.0
        )
        >= 0.5
    )
    gt = mask_bounds(rot_mask)
    new_mask = rot_mask if img.mask is not None else None
    return AnnotatedImage(image, gt, img.source_id + f"-rot{angle_deg:g}", new_mask)


def blur(img: AnnotatedImage, sigma: float) -> AnnotatedImage:
    """Gaussian blur; the box (and mask) are unchanged."""
    if not (0 < sigma <= BLUR_SIGMA_LIMIT):
        raise ValueError(f"blur sigma {sigma} outside (0, {BLUR_SIGMA_LIMIT}]")
    soft = ndimage.gaussian_filter(img.image.astype(np.float32), sigma, mode="nearest")
    image = np.clip(np.rint(soft), 0, 255).astype(np.uint8)
    mask = img.mask.copy() if img.mask is not None else None
    return AnnotatedImage(image, img.gt, img.source_id + f"-blur{sigma:g}", mask)


def augment(img: AnnotatedImage, op: str, *, angle: float = 0.0, sigma: float = 1.0) -> AnnotatedImage:
    """Dispatch: op in {'hflip', 'rotate', 'blur'} with its parameter."""
    if op == "hflip":
        return hflip(img)
    if op == "rotate":
        return rotate(img, angle)
    if op == "blur":
        return blur(img, sigma)
    raise ValueError(f"unknown augmentation {op!r}")


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(images: list[AnnotatedImage], out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Writes PNGs plus the CSV manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    manifest = out / manifest_name
    with open(manifest, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_FIELDS) + "\n")
        for img in images:
            rel = f"images/{img.source_id}.png"
            Image.fromarray(img.image, mode="L").save(out / rel)
            g = img.gt
            fh.write(f"{rel},{g.x_min!r},{g.y_min!r},{g.x_max!r},{g.y_max!r}\n")
    return manifest


def load_dataset(manifest_path) -> list[AnnotatedImage]:
    """Reads a manifest and its images, validating every box."""
    path = Path(manifest_path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest (missing header)") from None
        if tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise DataError(f"{path}: bad header {header!r}, expected {','.join(MANIFEST_FIELDS)}")
        images = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path} row {lineno}: expected 5 fields, got {len(row)}")
            rel = row[0]
            img_path = path.parent / rel
            if not img_path.is_file():
                raise DataError(f"{path} row {lineno}: image not found: {img_path}")
            try:
                coords = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path} row {lineno}: bad coordinate: {exc}") from None
            arr = np.asarray(Image.open(img_path).convert("L"), dtype=np.uint8)
            try:
                gt = Box(*coords)
            except InvalidBoxError as exc:
                raise DataError(f"{path} row {lineno}: {exc}") from None
            h, w = arr.shape
            if gt.x_min < 0 or gt.y_min < 0 or gt.x_max > w or gt.y_max > h:
                raise DataError(f"{path} row {lineno}: box {coords} exceeds {w}x{h} image bounds")
            images.append(AnnotatedImage(arr, gt, rel.rsplit("/", 1)[-1].rsplit(".", 1)[0]))
    return images


def split(dataset: list, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle then prefix split into (train, test)."""
    if not (0 < fraction < 1):
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    k = int(round(fraction * len(dataset)))
    return [dataset[i] for i in perm[:k]], [dataset[i] for i in perm[k:]]


# ---------------------------------------------------------------------------
# pixel plumbing


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 [H,W] grayscale -> centered float32 [3,H,W] network input."""
    x = image.astype(np.float32) / 255.0 - 0.5
    return np.repeat(x[None], 3, axis=0)


def resample_region(image: np.ndarray, box: Box, out_h: int, out_w: int) -> np.ndarray:
    """Clamped bilinear resample of a continuous source rectangle to out_h x out_w."""
    h, w = image.shape
    src = image.astype(np.float64)
    xs = box.x_min + (np.arange(out_w) + 0.5) * (box.width / out_w) - 0.5
    ys = box.y_min + (np.arange(out_h) + 0.5) * (box.height / out_h) - 0.5
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return (top * (1 - fy[:, None]) + bot * fy[:, None]).astype(np.float32)


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Whole-image bilinear resize, returned as uint8."""
    h, w = image.shape
    vals = resample_region(image, Box(0.0, 0.0, float(w), float(h)), out_h, out_w)
    return np.clip(np.rint(vals), 0, 255).astype(np.uint8)
