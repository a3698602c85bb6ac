"""Detector network topologies on the autodiff substrate.

Two model kinds share a pruned-VGG trunk (13 conv layers in blocks of
2,2,3,3,3 with four max-pools, tapped at 1/8 and 1/16 resolution):

* ``FusionNet`` — a single-stage detector with two head levels: the "mid"
  level fuses a channel-reduced 1/8 tap with the upsampled, reduced 1/16
  tap, while the "deep" level reads the 1/16 tap directly; both pass
  through a multi-branch context block (stacked 3x3 convs emulating 5x5
  and 7x7 receptive fields) before 1x1 classification/regression heads.
* ``MultiBoxNet`` — a multi-scale detector with five prediction sets of
  progressively smaller feature maps, each emitting k*(classes+4)
  channels per cell; used standalone and as both stages of the cascade.

Models serialize to a small binary format (see ``save_model``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import (
    AnchorLevelConfig,
    Box,
    Detection,
    anchor_array,
    clip_box,
    decode_array,
    generate_anchors,
    nms,
)
from .flatcfg import dataclass_from_flat, dataclass_to_flat, format_flat, parse_flat

TRUNK_WIDTHS = (8, 16, 32, 64, 64)
TRUNK_CONVS_PER_BLOCK = (2, 2, 3, 3, 3)


@dataclass(frozen=True)
class BaseNetConfig:
    """Trunk shape: five conv blocks with taps at 1/8 and 1/16 scale."""

    input_size: int = 320
    in_channels: int = 3
    block_widths: tuple[int, ...] = TRUNK_WIDTHS

    def __post_init__(self):
        if self.input_size % 16 != 0 or self.input_size < 32:
            raise ValueError(f"input_size must be a multiple of 16 and >= 32, got {self.input_size}")
        if len(self.block_widths) != 5 or any(w < 1 for w in self.block_widths):
            raise ValueError(f"block_widths needs 5 positive entries, got {self.block_widths}")


@dataclass(frozen=True)
class ContextModuleConfig:
    """Three branches of 1, 2, and 3 chained 3x3 convs, concatenated."""

    in_channels: int
    branch_channels: int

    def __post_init__(self):
        if self.in_channels < 1 or self.branch_channels < 1:
            raise ValueError("context module channels must be positive")

    @property
    def out_channels(self) -> int:
        return 3 * self.branch_channels


@dataclass(frozen=True)
class HeadOutput:
    """Per-level raw head maps: 2K class logits and 4K box offsets."""

    cls_logits: Tensor
    reg_offsets: Tensor
    level: str


@dataclass(frozen=True)
class FusionConfig:
    input_size: int = 320
    in_channels: int = 3
    block_widths: tuple[int, ...] = TRUNK_WIDTHS
    reduce_channels: int = 16
    context_branch_channels: int = 8
    mid_scales: tuple[float, ...] = (40.0, 64.0)
    deep_scales: tuple[float, ...] = (80.0, 128.0)
    ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        BaseNetConfig(self.input_size, self.in_channels, self.block_widths)
        if not self.mid_scales or not self.deep_scales or not self.ratios:
            raise ValueError("scale and ratio lists must be non-empty")

    def base(self) -> BaseNetConfig:
        return BaseNetConfig(self.input_size, self.in_channels, self.block_widths)


@dataclass(frozen=True)
class MultiBoxConfig:
    """Five prediction sets; each cell emits slots_per_cell*(classes+4)."""

    input_size: int = 160
    in_channels: int = 3
    block_widths: tuple[int, ...] = TRUNK_WIDTHS
    set1_channels: int = 64
    bottleneck_channels: int = 32
    extra_channels: int = 64
    num_classes: int = 2
    slots_per_cell: int = 2
    scale_min_frac: float = 0.1
    scale_max_frac: float = 0.9
    ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        BaseNetConfig(self.input_size, self.in_channels, self.block_widths)
        if self.num_classes != 2:
            raise ValueError("only the two-class (background/target) head is supported")
        if self.slots_per_cell < 1:
            raise ValueError("slots_per_cell must be >= 1")
        if not (0 < self.scale_min_frac < self.scale_max_frac):
            raise ValueError("need 0 < scale_min_frac < scale_max_frac")
        grids = self.set_grids()
        if any(b >= a for a, b in zip(grids, grids[1:])):
            raise ValueError(f"prediction-set grids must strictly shrink, got {grids} (input too small)")

    def base(self) -> BaseNetConfig:
        return BaseNetConfig(self.input_size, self.in_channels, self.block_widths)

    def set_grids(self) -> tuple[int, ...]:
        g = self.input_size // 16
        grids = [g]
        for _ in range(4):
            g = (g + 2 - 3) // 2 + 1  # 3x3, stride 2, pad 1
            grids.append(g)
        return tuple(grids)


def _flatten_head(t: Tensor, k: int, per: int) -> Tensor:
    """[N, K*per, H, W] -> [N*H*W*K, per] rows matching anchor order."""
    n, c, h, w = t.shape
    if c != k * per:
        raise ValueError(f"expected {k * per} channels, got {c}")
    r = ad.reshape(t, (n, k, per, h, w))
    r = ad.moveaxis(r, (1, 2), (3, 4))
    return ad.reshape(r, (n * h * w * k, per))


class _Net:
    """Shared parameter registry, trunk, and inference plumbing."""

    kind = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._anchor_cache: dict[str, tuple[list, np.ndarray]] = {}

    def _add_conv(self, rng, name: str, cin: int, cout: int, k: int, dtype):
        w = ad.he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        pad = (w.shape[2] - 1) // 2
        return ad.conv2d(x, w, b, stride=stride, padding=pad)

    def _init_trunk(self, rng, base: BaseNetConfig, dtype):
        cin = base.in_channels
        for bi, width in enumerate(base.block_widths):
            for ci in range(TRUNK_CONVS_PER_BLOCK[bi]):
                self._add_conv(rng, f"trunk.block{bi + 1}.conv{ci + 1}", cin, width, 3, dtype)
                cin = width

    def _trunk_forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns the 1/8-scale and 1/16-scale taps."""
        t = x
        tap_mid = None
        for bi in range(5):
            for ci in range(TRUNK_CONVS_PER_BLOCK[bi]):
                t = ad.relu(self._conv(f"trunk.block{bi + 1}.conv{ci + 1}", t))
            if bi == 3:
                tap_mid = t
            if bi < 4:
                t = ad.maxpool2(t)
        return tap_mid, t

    def _context(self, prefix: str, x: Tensor) -> Tensor:
        branches = []
        for b, depth in enumerate((1, 2, 3)):
            t = x
            for j in range(depth):
                t = ad.relu(self._conv(f"{prefix}.branch{b + 1}.conv{j + 1}", t))
            branches.append(t)
        return ad.concat_channels(branches)

    def _init_context(self, rng, prefix: str, cfg: ContextModuleConfig, dtype):
        for b, depth in enumerate((1, 2, 3)):
            cin = cfg.in_channels
            for j in range(depth):
                self._add_conv(rng, f"{prefix}.branch{b + 1}.conv{j + 1}", cin, cfg.branch_channels, 3, dtype)
                cin = cfg.branch_channels

    # -- anchors ------------------------------------------------------

    def anchor_levels(self) -> list[AnchorLevelConfig]:
        raise NotImplementedError

    def anchors(self, level: str) -> tuple[list, np.ndarray]:
        """(anchor list, [A,4] corner array) for one head level, cached."""
        if level not in self._anchor_cache:
            for cfg in self.anchor_levels():
                if cfg.level == level:
                    lst = generate_anchors(self.input_size, self.input_size, cfg)
                    self._anchor_cache[level] = (lst, anchor_array(lst))
                    break
            else:
                raise KeyError(f"unknown head level {level!r}")
        return self._anchor_cache[level]

    # -- forward / rows -----------------------------------------------

    @property
    def input_size(self) -> int:
        return self.cfg.input_size

    def forward(self, x: Tensor) -> list[HeadOutput]:
        raise NotImplementedError

    def head_rows(self, x: Tensor) -> dict[str, tuple[Tensor, Tensor]]:
        """Per level: (class-logit rows [N*A, 2], offset rows [N*A, 4])."""
        out = {}
        for head in self.forward(x):
            k = head.cls_logits.shape[1] // 2
            out[head.level] = (
                _flatten_head(head.cls_logits, k, 2),
                _flatten_head(head.reg_offsets, k, 4),
            )
        return out

    def num_params(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())


class FusionNet(_Net):
    kind = "fusion"

    def __init__(self, cfg: FusionConfig = FusionConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self._init_trunk(rng, cfg.base(), dtype)
        red = cfg.reduce_channels
        deep_w = cfg.block_widths[4]
        mid_w = cfg.block_widths[3]
        self._add_conv(rng, "fuse.reduce_mid", mid_w, red, 1, dtype)
        self._add_conv(rng, "fuse.reduce_deep", deep_w, red, 1, dtype)
        self._add_conv(rng, "fuse.merge", red, red, 3, dtype)
        ctx_mid = ContextModuleConfig(red, cfg.context_branch_channels)
        ctx_deep = ContextModuleConfig(deep_w, cfg.context_branch_channels)
        self._init_context(rng, "ctx_mid", ctx_mid, dtype)
        self._init_context(rng, "ctx_deep", ctx_deep, dtype)
        for level, ctx, scales in (("mid", ctx_mid, cfg.mid_scales), ("deep", ctx_deep, cfg.deep_scales)):
            k = len(scales) * len(cfg.ratios)
            self._add_conv(rng, f"head_{level}.cls", ctx.out_channels, 2 * k, 1, dtype)
            self._add_conv(rng, f"head_{level}.reg", ctx.out_channels, 4 * k, 1, dtype)

    def anchor_levels(self) -> list[AnchorLevelConfig]:
        return [
            AnchorLevelConfig("mid", 8.0, self.cfg.mid_scales, self.cfg.ratios),
            AnchorLevelConfig("deep", 16.0, self.cfg.deep_scales, self.cfg.ratios),
        ]

    def forward(self, x: Tensor) -> list[HeadOutput]:
        tap_mid, tap_deep = self._trunk_forward(x)
        r_mid = ad.relu(self._conv("fuse.reduce_mid", tap_mid))
        r_deep = ad.relu(self._conv("fuse.reduce_deep", tap_deep))
        fused = ad.add(r_mid, ad.bilinear_upsample2x(r_deep))
        fused = ad.relu(self._conv("fuse.merge", fused))
        ctx_m = self._context("ctx_mid", fused)
        ctx_d = self._context("ctx_deep", tap_deep)
        return [
            HeadOutput(self._conv("head_mid.cls", ctx_m), self._conv("head_mid.reg", ctx_m), "mid"),
            HeadOutput(self._conv("head_deep.cls", ctx_d), self._conv("head_deep.reg", ctx_d), "deep"),
        ]


class MultiBoxNet(_Net):
    kind = "multibox"

    def __init__(self, cfg: MultiBoxConfig = MultiBoxConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self._init_trunk(rng, cfg.base(), dtype)
        self.slots = cfg.slots_per_cell * len(cfg.ratios)
        head_ch = self.slots * (cfg.num_classes + 4)
        cin = cfg.block_widths[4]
        for j in range(4):
            self._add_conv(rng, f"set1.conv{j + 1}", cin, cfg.set1_channels, 3, dtype)
            cin = cfg.set1_channels
        self._add_conv(rng, "set1.conv5", cin, cfg.set1_channels, 1, dtype)
        cin = cfg.set1_channels
        for s in range(2, 6):
            self._add_conv(rng, f"set{s}.reduce", cin, cfg.bottleneck_channels, 1, dtype)
            self._add_conv(rng, f"set{s}.down", cfg.bottleneck_channels, cfg.extra_channels, 3, dtype)
            cin = cfg.extra_channels
        widths = [cfg.set1_channels] + [cfg.extra_channels] * 4
        for s in range(1, 6):
            self._add_conv(rng, f"head_set{s}", widths[s - 1], head_ch, 3, dtype)

    def _scale_step(self) -> float:
        return (self.cfg.scale_max_frac / self.cfg.scale_min_frac) ** 0.25

    def anchor_levels(self) -> list[AnchorLevelConfig]:
        cfg = self.cfg
        grids = cfg.set_grids()
        step = self._scale_step()
        levels = []
        for s in range(5):
            base = cfg.scale_min_frac * step**s * cfg.input_size
            scales = tuple(base * step ** (m / cfg.slots_per_cell) for m in range(cfg.slots_per_cell))
            levels.append(AnchorLevelConfig(f"set{s + 1}", cfg.input_size / grids[s], scales, cfg.ratios))
        return levels

    def forward(self, x: Tensor) -> list[HeadOutput]:
        _, t = self._trunk_forward(x)
        for j in range(4):
            t = ad.relu(self._conv(f"set1.conv{j + 1}", t))
        t = ad.relu(self._conv("set1.conv5", t))
        feats = [t]
        for s in range(2, 6):
            t = ad.relu(self._conv(f"set{s}.reduce", t))
            t = ad.relu(self._conv(f"set{s}.down", t, stride=2))
            feats.append(t)
        heads = []
        c = self.cfg.num_classes
        for s, feat in enumerate(feats, start=1):
            combined = self._conv(f"head_set{s}", feat)
            n, _, h, w = combined.shape
            r = ad.reshape(combined, (n, self.slots, c + 4, h, w))
            cls = ad.reshape(ad.slice_axis(r, 2, 0, c), (n, self.slots * c, h, w))
            reg = ad.reshape(ad.slice_axis(r, 2, c, c + 4), (n, self.slots * 4, h, w))
            heads.append(HeadOutput(cls, reg, f"set{s}"))
        return heads


# ---------------------------------------------------------------------------
# inference


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def infer(model: _Net, image: np.ndarray, score_threshold: float = 0.5, nms_iou: float = 0.7) -> list[Detection]:
    """Detections for one preprocessed [3, S, S] image, NMS'd, best first.

    Class probabilities come from a softmax over the two class logits;
    boxes are decoded against each level's own anchors and clamped to the
    image, candidates below the score threshold are dropped, and survivors
    from all levels are pooled through greedy NMS.
    """
    s = model.input_size
    if image.ndim != 3 or image.shape[1] != s or image.shape[2] != s:
        raise ValueError(f"expected [C, {s}, {s}] input, got {image.shape}")
    x = Tensor(image[None].astype(np.float32, copy=False))
    candidates: list[Detection] = []
    for level, (cls_rows, reg_rows) in model.head_rows(x).items():
        probs = _softmax_rows(cls_rows.data)[:, 1]
        keep = probs >= score_threshold
        if not keep.any():
            continue
        _, arr = model.anchors(level)
        raw = decode_array(reg_rows.data[keep], arr[keep])
        finite = np.isfinite(raw).all(axis=1)
        for row, p in zip(raw[finite], probs[keep][finite]):
            candidates.append(Detection(clip_box(Box(*row), s, s), float(p), level))
    return nms(candidates, nms_iou)


# ---------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"UESG"
MODEL_VERSION = 1
_CONFIG_KINDS = {"fusion": (FusionNet, FusionConfig), "multibox": (MultiBoxNet, MultiBoxConfig)}


class ModelFormatError(ValueError):
    """Raised for malformed or unsupported model files."""


def save_model(model: _Net, path) -> None:
    """Binary layout: magic, u16 version, config blob, descriptors, f32 data.

    The config blob is the flat-text model config prefixed by its u32
    byte length. Descriptors are (u8 name length, ASCII name, u32 ndim,
    u32 dims...) per parameter; the payload holds each parameter as raw
    little-endian float32 in descriptor order.
    """
    cfg_map = {"kind": model.kind}
    cfg_map.update(dataclass_to_flat(model.cfg))
    blob = format_flat(cfg_map).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            ascii_name = name.encode("ascii")
            fh.write(struct.pack("<B", len(ascii_name)))
            fh.write(ascii_name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_model(path) -> _Net:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ModelFormatError(f"{path}: truncated model file")
        out = raw[off : off + n]
        off += n
        return out

    if take(4) != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")
    (blob_len,) = struct.unpack("<I", take(4))
    cfg_map = parse_flat(take(blob_len).decode("ascii"))
    kind = cfg_map.pop("kind", None)
    if kind not in _CONFIG_KINDS:
        raise ModelFormatError(f"{path}: unknown model kind {kind!r}")
    net_cls, cfg_cls = _CONFIG_KINDS[kind]
    model = net_cls(dataclass_from_flat(cfg_cls, cfg_map))
    (count,) = struct.unpack("<I", take(4))
    if count != len(model.params):
        raise ModelFormatError(f"{path}: expected {len(model.params)} parameters, file has {count}")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<B", take(1))
        name = take(name_len).decode("ascii")
        (ndim,) = struct.unpack("<I", take(4))
        shapes.append((name, struct.unpack(f"<{ndim}I", take(4 * ndim))))
    for name, shape in shapes:
        if name not in model.params:
            raise ModelFormatError(f"{path}: unexpected parameter {name!r}")
        p = model.params[name]
        if tuple(p.data.shape) != shape:
            raise ModelFormatError(f"{path}: parameter {name!r} has shape {shape}, expected {tuple(p.data.shape)}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        p.data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return model
