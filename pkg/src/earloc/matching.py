"""Anchor-to-ground-truth matching and the two detector losses.

Matching labels an anchor positive when its best IOU against any ground
truth exceeds 0.5, and additionally force-matches each ground truth's
single best anchor so every target owns at least one positive. Class 0 is
background, class 1 is the target.

``loss_fusion`` normalizes classification and regression per head level;
``loss_multibox`` normalizes the summed confidence and localization terms
by the global positive count. Both hard-mine negatives for the
classification term at a configurable negative:positive ratio, with an
all-negatives mode for A/B comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, smooth_l1, smooth_l1_grad  # noqa: F401  (re-exported)
from .boxes import Anchor, Box, anchor_array, encode_array, iou_matrix


@dataclass
class MatchResult:
    """Per-anchor labels (1 positive / 0 negative), GT indices, and targets.

    ``targets`` holds the encoded regression offsets on positive rows and
    zeros elsewhere; ``matched_gt`` is -1 on negatives.
    """

    labels: np.ndarray
    matched_gt: np.ndarray
    targets: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def num_positives(self) -> int:
        return int((self.labels == 1).sum())


def match(anchors, gts: list[Box], iou_threshold: float = 0.5) -> MatchResult:
    """Label anchors against ground truths.

    ``anchors`` is an (A, 4) corner array or a list of Anchor. Positivity:
    best IOU > ``iou_threshold``, matched to the argmax GT; then each GT's
    highest-IOU anchor is forced positive (ties -> lower anchor index),
    later GTs winning contested anchors.
    """
    if len(anchors) == 0:
        raise ValueError("anchor list is empty")
    if not gts:
        raise ValueError("at least one ground-truth box is required")
    if isinstance(anchors, np.ndarray):
        arr = anchors.astype(np.float64).reshape(-1, 4)
    elif isinstance(anchors[0], Anchor):
        arr = anchor_array(anchors)
    else:
        arr = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_arr = np.stack([g.as_array() for g in gts])
    m = iou_matrix(arr, gt_arr)
    a = arr.shape[0]
    labels = np.zeros(a, dtype=np.int8)
    matched = np.full(a, -1, dtype=np.int32)
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(a), best_gt]
    pos = best_iou > iou_threshold
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    for j in range(len(gts)):
        i = int(m[:, j].argmax())
        labels[i] = 1
        matched[i] = j
    targets = np.zeros((a, 4), dtype=np.float64)
    idx = np.flatnonzero(labels == 1)
    targets[idx] = encode_array(gt_arr[matched[idx]], arr[idx])
    return MatchResult(labels, matched, targets)


@dataclass(frozen=True)
class LossWeights:
    """Loss knobs: per-loss regression weights and negative mining."""

    reg_lambda: float = 1.0
    reg_alpha: float = 1.0
    hard_negative_ratio: float = 3.0
    mine_all_negatives: bool = False

    def __post_init__(self):
        if self.reg_lambda <= 0 or self.reg_alpha <= 0:
            raise ValueError("regression weights must be positive")
        if self.hard_negative_ratio < 1:
            raise ValueError("hard_negative_ratio must be >= 1")


@dataclass
class LossBreakdown:
    """Scalar loss tensor plus reporting components.

    ``total``'s value equals cls_component + reg_component (the regression
    side already carries its constant weight). ``counts`` maps level ->
    (#anchors in the classification term, #positives).
    """

    total: Tensor
    cls_component: float
    reg_component: float
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    num_positives: int = 0


def _background_ce(rows: np.ndarray) -> np.ndarray:
    """Cross-entropy of each row against the background class (no grad)."""
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    return lse - rows[:, 0]


def _mined_negatives(cls_data: np.ndarray, labels: np.ndarray, budget: int, mine_all: bool) -> np.ndarray:
    neg_idx = np.flatnonzero(labels == 0)
    if mine_all or neg_idx.size <= budget:
        return neg_idx
    if budget <= 0:
        return neg_idx[:0]
    losses = _background_ce(cls_data[neg_idx])
    order = np.argsort(-losses, kind="stable")
    return neg_idx[order[:budget]]


def _check_levels(level_rows, matches):
    if set(level_rows) != set(matches):
        raise ValueError(f"level mismatch: rows {sorted(level_rows)} vs matches {sorted(matches)}")
    for level, (cls_rows, reg_rows) in level_rows.items():
        a = len(matches[level].labels)
        if cls_rows.shape != (a, 2) or reg_rows.shape != (a, 4):
            raise ValueError(
                f"level {level!r}: expected rows ({a},2)/({a},4), got {cls_rows.shape}/{reg_rows.shape}"
            )


def _sum_terms(terms: list[Tensor], dtype) -> Tensor:
    if not terms:
        return Tensor(np.asarray(0.0, dtype=dtype))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _ce_on(cls_rows: Tensor, pos: np.ndarray, neg: np.ndarray):
    sel = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, dtype=np.intp), np.zeros(neg.size, dtype=np.intp)])
    return ad.cross_entropy_logits(ad.take_rows(cls_rows, sel), labels, np.ones(sel.size))


def loss_fusion(
    level_rows: dict[str, tuple[Tensor, Tensor]],
    matches: dict[str, "MatchResult"],
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Per-level-normalized loss for the two-level fusion detector.

    total = sum_k (1/N_k^c) * CE(selected anchors at level k)
          + reg_lambda * sum_k (1/N_k^r) * smoothL1(positives at level k)

    where N_k^c counts the selected (positive + mined negative) anchors
    and N_k^r the positives; a level with no positives contributes no
    regression term, and one with no selected anchors no classification
    term.
    """
    _check_levels(level_rows, matches)
    dtype = next(iter(level_rows.values()))[0].dtype
    cls_terms: list[Tensor] = []
    reg_terms: list[Tensor] = []
    counts: dict[str, tuple[int, int]] = {}
    n_pos_total = 0
    for level, (cls_rows, reg_rows) in level_rows.items():
        mr = matches[level]
        pos = mr.positive_indices
        budget = int(weights.hard_negative_ratio * pos.size)
        neg = _mined_negatives(cls_rows.data, mr.labels, budget, weights.mine_all_negatives)
        n_c, n_r = pos.size + neg.size, pos.size
        counts[level] = (n_c, n_r)
        n_pos_total += n_r
        if n_c > 0:
            cls_terms.append(ad.scale(_ce_on(cls_rows, pos, neg), 1.0 / n_c))
        if n_r > 0:
            sl = ad.smooth_l1_sum(ad.take_rows(reg_rows, pos), mr.targets[pos], np.ones(n_r))
            reg_terms.append(ad.scale(sl, 1.0 / n_r))
    cls_total = _sum_terms(cls_terms, dtype)
    reg_total = _sum_terms(reg_terms, dtype)
    total = ad.add(cls_total, ad.scale(reg_total, weights.reg_lambda))
    return LossBreakdown(
        total=total,
        cls_component=float(cls_total.data),
        reg_component=weights.reg_lambda * float(reg_total.data),
        counts=counts,
        num_positives=n_pos_total,
    )


def loss_multibox(
    level_rows: dict[str, tuple[Tensor, Tensor]],
    matches: dict[str, "MatchResult"],
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Globally-normalized loss for the multi-set detector.

    total = (1/N) * (L_conf + reg_alpha * L_reg) with N the positive count
    over all sets; negatives for L_conf are hard-mined globally across
    sets. N = 0 yields a zero loss (the training step is skipped).
    """
    _check_levels(level_rows, matches)
    dtype = next(iter(level_rows.values()))[0].dtype
    levels = list(level_rows)
    n = sum(matches[lv].num_positives for lv in levels)
    counts = {lv: (matches[lv].num_positives, matches[lv].num_positives) for lv in levels}
    if n == 0:
        zero = Tensor(np.asarray(0.0, dtype=dtype))
        return LossBreakdown(zero, 0.0, 0.0, counts, 0)

    # global hard-negative mining across sets
    budget = int(weights.hard_negative_ratio * n)
    neg_losses: list[np.ndarray] = []
    neg_tags: list[np.ndarray] = []
    neg_locals: list[np.ndarray] = []
    for t, lv in enumerate(levels):
        cls_rows, _ = level_rows[lv]
        idx = np.flatnonzero(matches[lv].labels == 0)
        if idx.size:
            neg_losses.append(_background_ce(cls_rows.data[idx]))
            neg_tags.append(np.full(idx.size, t, dtype=np.intp))
            neg_locals.append(idx)
    chosen_per_level: dict[str, np.ndarray] = {lv: np.empty(0, dtype=np.intp) for lv in levels}
    if neg_losses:
        all_losses = np.concatenate(neg_losses)
        all_tags = np.concatenate(neg_tags)
        all_locals = np.concatenate(neg_locals)
        if not weights.mine_all_negatives and all_losses.size > budget:
            order = np.argsort(-all_losses, kind="stable")[:budget]
            all_tags, all_locals = all_tags[order], all_locals[order]
        for t, lv in enumerate(levels):
            sel = all_locals[all_tags == t]
            chosen_per_level[lv] = np.sort(sel)

    conf_terms: list[Tensor] = []
    reg_terms: list[Tensor] = []
    for lv in levels:
        cls_rows, reg_rows = level_rows[lv]
        mr = matches[lv]
        pos = mr.positive_indices
        neg = chosen_per_level[lv]
        counts[lv] = (pos.size + neg.size, pos.size)
        if pos.size + neg.size > 0:
            conf_terms.append(_ce_on(cls_rows, pos, neg))
        if pos.size > 0:
            reg_terms.append(ad.smooth_l1_sum(ad.take_rows(reg_rows, pos), mr.targets[pos], np.ones(pos.size)))
    conf_sum = _sum_terms(conf_terms, dtype)
    reg_sum = _sum_terms(reg_terms, dtype)
    total = ad.scale(ad.add(conf_sum, ad.scale(reg_sum, weights.reg_alpha)), 1.0 / n)
    return LossBreakdown(
        total=total,
        cls_component=float(conf_sum.data) / n,
        reg_component=weights.reg_alpha * float(reg_sum.data) / n,
        counts=counts,
        num_positives=n,
    )
