"""Finite-difference verification of every backward rule.

Each check builds a scalar loss from float64 leaf tensors, runs reverse-
mode backward, and compares against central differences at h=1e-3. Inputs
are constructed to sit away from non-smooth points (relu kinks, pooling
ties, mining rank swaps) so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import matching
from .autodiff import Tensor, finite_difference_check
from .boxes import Box
from .matching import LossWeights, match
from .nets import FusionConfig, FusionNet

LAYER_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(0.0, 1.0, size=shape)
    if away_from_zero:
        x = x + np.sign(x) * 0.05
    return Tensor(x.astype(np.float64), requires_grad=True)


def _check(name: str, build_loss, tensors, tolerance: float = LAYER_TOLERANCE) -> CheckResult:
    return CheckResult(name, finite_difference_check(build_loss, tensors), tolerance)


def run_layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    x = _leaf(rng, (2, 3, 6, 6))
    w = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    p = rng.normal(size=(2, 4, 6, 6))
    results.append(_check("conv2d_3x3", lambda: ad.proj_sum(ad.conv2d(x, w, b, 1, 1), p), [x, w, b]))

    x1 = _leaf(rng, (2, 3, 5, 5))
    w1 = _leaf(rng, (2, 3, 1, 1))
    b1 = _leaf(rng, (2,))
    p1 = rng.normal(size=(2, 2, 5, 5))
    results.append(_check("conv2d_1x1", lambda: ad.proj_sum(ad.conv2d(x1, w1, b1, 1, 0), p1), [x1, w1, b1]))

    xs = _leaf(rng, (1, 2, 8, 8))
    ws = _leaf(rng, (3, 2, 3, 3))
    bs = _leaf(rng, (3,))
    ps = rng.normal(size=(1, 3, 4, 4))
    results.append(_check("conv2d_3x3_stride2", lambda: ad.proj_sum(ad.conv2d(xs, ws, bs, 2, 1), ps), [xs, ws, bs]))

    xp = _leaf(rng, (2, 3, 6, 6))
    pp = rng.normal(size=(2, 3, 3, 3))
    results.append(_check("maxpool2", lambda: ad.proj_sum(ad.maxpool2(xp), pp), [xp]))

    xr = _leaf(rng, (3, 7), away_from_zero=True)
    pr = rng.normal(size=(3, 7))
    results.append(_check("relu", lambda: ad.proj_sum(ad.relu(xr), pr), [xr]))

    xa = _leaf(rng, (3, 4))
    ya = _leaf(rng, (3, 4))
    pa = rng.normal(size=(3, 4))
    results.append(_check("elementwise_add", lambda: ad.proj_sum(ad.add(xa, ya), pa), [xa, ya]))

    xc1 = _leaf(rng, (1, 2, 3, 3))
    xc2 = _leaf(rng, (1, 3, 3, 3))
    pc = rng.normal(size=(1, 5, 3, 3))
    results.append(_check("concat_channels", lambda: ad.proj_sum(ad.concat_channels([xc1, xc2]), pc), [xc1, xc2]))

    xl = _leaf(rng, (4, 5))
    wl = _leaf(rng, (3, 5))
    bl = _leaf(rng, (3,))
    pl = rng.normal(size=(4, 3))
    results.append(_check("linear", lambda: ad.proj_sum(ad.linear(xl, wl, bl), pl), [xl, wl, bl]))

    xm = _leaf(rng, (5, 4))
    pm = rng.normal(size=(5, 4))
    results.append(_check("softmax", lambda: ad.proj_sum(ad.softmax(xm), pm), [xm]))

    xg = _leaf(rng, (3, 3))
    pg = rng.normal(size=(3, 3))
    results.append(_check("sigmoid", lambda: ad.proj_sum(ad.sigmoid(xg), pg), [xg]))

    xu = _leaf(rng, (1, 2, 3, 4))
    pu = rng.normal(size=(1, 2, 6, 8))
    results.append(_check("bilinear_upsample2x", lambda: ad.proj_sum(ad.bilinear_upsample2x(xu), pu), [xu]))

    results.append(_loss_fusion_check(rng))
    results.append(_loss_multibox_check(rng))
    return results


def _grid_anchors(n: int, size: float, scale: float) -> np.ndarray:
    """n x n grid of square anchors, corner-array form."""
    stride = size / n
    cs = (np.arange(n) + 0.5) * stride
    cx, cy = np.meshgrid(cs, cs)
    cx, cy = cx.reshape(-1), cy.reshape(-1)
    half = scale / 2
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


def _spread_logits(rng, a: int) -> np.ndarray:
    """Class logits whose background losses are well separated (mining-stable)."""
    z = np.zeros((a, 2))
    z[:, 0] = np.linspace(-1.5, 1.5, a)
    z[:, 1] = rng.normal(0.0, 0.1, size=a)
    return z


def _loss_fusion_check(rng) -> CheckResult:
    anchors = {"mid": _grid_anchors(4, 64.0, 20.0), "deep": _grid_anchors(2, 64.0, 40.0)}
    gt = [Box(22.0, 20.0, 44.0, 42.0)]
    matches = {lvl: match(arr, gt) for lvl, arr in anchors.items()}
    tensors = {}
    for lvl, arr in anchors.items():
        a = arr.shape[0]
        tensors[lvl] = (
            Tensor(_spread_logits(rng, a), requires_grad=True),
            Tensor(rng.normal(0.0, 0.3, size=(a, 4)), requires_grad=True),
        )
    weights = LossWeights(reg_lambda=1.3, hard_negative_ratio=3.0)

    def build():
        return matching.loss_fusion(tensors, matches, weights).total

    flat = [t for pair in tensors.values() for t in pair]
    return _check("loss_fusion", build, flat)


def _loss_multibox_check(rng) -> CheckResult:
    anchors = {"set1": _grid_anchors(3, 60.0, 24.0), "set2": _grid_anchors(2, 60.0, 36.0)}
    gt = [Box(18.0, 16.0, 44.0, 40.0)]
    matches = {lvl: match(arr, gt) for lvl, arr in anchors.items()}
    tensors = {}
    for lvl, arr in anchors.items():
        a = arr.shape[0]
        tensors[lvl] = (
            Tensor(_spread_logits(rng, a), requires_grad=True),
            Tensor(rng.normal(0.0, 0.3, size=(a, 4)), requires_grad=True),
        )
    weights = LossWeights(reg_alpha=0.7, hard_negative_ratio=3.0)

    def build():
        return matching.loss_multibox(tensors, matches, weights).total

    flat = [t for pair in tensors.values() for t in pair]
    return _check("loss_multibox", build, flat)


def run_end_to_end_check(seed: int = 5) -> CheckResult:
    """Micro fusion net on one 32x32 image: d(loss)/d(params) vs differences."""
    cfg = FusionConfig(
        input_size=32,
        block_widths=(2, 2, 2, 2, 2),
        reduce_channels=2,
        context_branch_channels=2,
        mid_scales=(8.0,),
        deep_scales=(16.0,),
    )
    model = FusionNet(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # Zero-init biases can leave relu inputs exactly at the kink (a dead
    # upstream map makes the pre-activation equal the bias).  Randomizing
    # them moves the evaluation to a generic, differentiable point.
    for name, t in model.params.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.3, 0.3, size=t.data.shape)
    image = Tensor(rng.uniform(-0.5, 0.5, size=(1, 3, 32, 32)))
    gt = [Box(10.0, 12.0, 22.0, 26.0)]
    matches = {lvl.level: match(model.anchors(lvl.level)[1], gt) for lvl in model.anchor_levels()}
    weights = LossWeights(mine_all_negatives=True)

    def build():
        return matching.loss_fusion(model.head_rows(image), matches, weights).total

    tensors = list(model.params.values())
    # h below the smallest kink margin of this configuration, so the
    # difference quotient never straddles a relu state change
    err = finite_difference_check(build, tensors, h=1e-4)
    return CheckResult("end_to_end_micro_net", err, END_TO_END_TOLERANCE)


def run_all(seed: int = 0) -> list[CheckResult]:
    return run_layer_checks(seed) + [run_end_to_end_check()]
