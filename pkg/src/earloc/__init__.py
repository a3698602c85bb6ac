"""earloc: anchor-based single-ROI detection on numpy, end to end.

The package trains and runs small convolutional detectors for images that
contain exactly one region of interest.  Everything is built on a compact
reverse-mode autodiff engine (:mod:`earloc.autodiff`); no deep-learning
framework is involved.  Two topologies are provided: a two-level detector
that fuses a mid- and a deep-resolution feature map (``FusionNet``) and a
multi-resolution one-pass stage (``MultiBoxNet``) that can be cascaded
— a full-frame pass followed by a zoomed-in second pass on the best crop.
"""

from .autodiff import NumericsError, Tensor, finite_difference_check
from .boxes import (
    Anchor,
    AnchorLevelConfig,
    Box,
    CenterBox,
    Detection,
    InvalidBoxError,
    decode,
    encode,
    generate_anchors,
    iou,
    nms,
)
from .cascade import CascadeConfig, CropTransform, build_stage2_dataset, detect_cascade, detect_resized
from .config import RunConfig
from .data import AnnotatedImage, DataError, SceneSpec, augment, generate, load_dataset, mask_bounds, split, write_dataset
from .evaluate import curve, f1_score, judge, objectness_vs_iou_report, outcome
from .matching import LossWeights, loss_fusion, loss_multibox, match
from .nets import FusionConfig, FusionNet, ModelFormatError, MultiBoxNet, MultiBoxConfig, infer, load_model, save_model
from .train import train, train_cascade

__version__ = "0.1.0"

__all__ = [
    "Anchor",
    "AnchorLevelConfig",
    "AnnotatedImage",
    "Box",
    "CascadeConfig",
    "CenterBox",
    "CropTransform",
    "DataError",
    "Detection",
    "FusionConfig",
    "FusionNet",
    "InvalidBoxError",
    "LossWeights",
    "ModelFormatError",
    "MultiBoxNet",
    "NumericsError",
    "RunConfig",
    "MultiBoxConfig",
    "SceneSpec",
    "Tensor",
    "augment",
    "build_stage2_dataset",
    "curve",
    "decode",
    "detect_cascade",
    "detect_resized",
    "encode",
    "f1_score",
    "finite_difference_check",
    "generate",
    "generate_anchors",
    "infer",
    "iou",
    "judge",
    "load_dataset",
    "load_model",
    "loss_fusion",
    "loss_multibox",
    "mask_bounds",
    "match",
    "nms",
    "objectness_vs_iou_report",
    "outcome",
    "save_model",
    "split",
    "train",
    "train_cascade",
    "write_dataset",
]
