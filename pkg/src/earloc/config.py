"""Run configuration: one flat dataclass covering both model kinds.

Configs live in flat ``key = value`` text files (see ``flatcfg``) and
round-trip losslessly. The learning rate moves linearly from
``lr_initial`` to ``lr_final`` across epochs; ``lr_constant`` pins it to
``lr_initial`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .flatcfg import dataclass_from_flat, dataclass_to_flat, format_flat, parse_flat
from .matching import LossWeights
from .nets import FusionConfig, FusionNet, MultiBoxNet, MultiBoxConfig

MODEL_KINDS = ("fusion", "multibox")


@dataclass(frozen=True)
class RunConfig:
    # model topology
    model_kind: str = "fusion"
    input_size: int = 320
    block_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    reduce_channels: int = 16
    context_branch_channels: int = 8
    mid_scales: tuple[float, ...] = (40.0, 64.0)
    deep_scales: tuple[float, ...] = (80.0, 128.0)
    set1_channels: int = 64
    bottleneck_channels: int = 32
    extra_channels: int = 64
    slots_per_cell: int = 2
    scale_min_frac: float = 0.1
    scale_max_frac: float = 0.9
    ratios: tuple[float, ...] = (1.0,)
    # optimization
    epochs: int = 30
    batch_size: int = 8
    lr_initial: float = 0.003
    lr_final: float = 0.004
    lr_constant: bool = False
    momentum: float = 0.9
    weight_decay: float = 0.0004
    # loss
    loss_lambda: float = 1.0
    loss_alpha: float = 1.0
    hard_negative_ratio: float = 3.0
    mine_all_negatives: bool = False
    match_iou: float = 0.5
    # inference
    nms_iou: float = 0.7
    score_threshold: float = 0.5
    # reproducibility
    seed: int = 0
    trace_steps: int = 10

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lr_initial", "lr_final", "loss_lambda", "loss_alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 < self.match_iou < 1):
            raise ValueError(f"match_iou must be in (0,1), got {self.match_iou}")
        if not (0 <= self.nms_iou <= 1 and 0 <= self.score_threshold <= 1):
            raise ValueError("nms_iou and score_threshold must lie in [0,1]")

    # -- model construction -------------------------------------------

    def build_model(self):
        if self.model_kind == "fusion":
            return FusionNet(
                FusionConfig(
                    input_size=self.input_size,
                    block_widths=self.block_widths,
                    reduce_channels=self.reduce_channels,
                    context_branch_channels=self.context_branch_channels,
                    mid_scales=self.mid_scales,
                    deep_scales=self.deep_scales,
                    ratios=self.ratios,
                ),
                seed=self.seed,
            )
        return MultiBoxNet(
            MultiBoxConfig(
                input_size=self.input_size,
                block_widths=self.block_widths,
                set1_channels=self.set1_channels,
                bottleneck_channels=self.bottleneck_channels,
                extra_channels=self.extra_channels,
                slots_per_cell=self.slots_per_cell,
                scale_min_frac=self.scale_min_frac,
                scale_max_frac=self.scale_max_frac,
                ratios=self.ratios,
            ),
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            reg_lambda=self.loss_lambda,
            reg_alpha=self.loss_alpha,
            hard_negative_ratio=self.hard_negative_ratio,
            mine_all_negatives=self.mine_all_negatives,
        )

    def lr_at(self, epoch: int) -> float:
        if self.lr_constant or self.epochs == 1:
            return self.lr_initial
        frac = epoch / (self.epochs - 1)
        return self.lr_initial + (self.lr_final - self.lr_initial) * frac

    # -- serialization -------------------------------------------------

    def to_text(self) -> str:
        return format_flat(dataclass_to_flat(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return dataclass_from_flat(cls, parse_flat(text))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))
