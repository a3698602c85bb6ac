"""Single-object detection evaluation: per-image judging and metric curves.

Each image is judged by its top-scoring detection only: no detection is a
false negative, a detection whose IOU with the ground truth clears the
threshold is a true positive, anything else a false positive. True
negatives are identically zero in this protocol, so
accuracy = TP / (TP + FP + FN). Undefined ratios (zero denominators)
stay undefined and render as "n/a" rather than 0.

``objectness_vs_iou_report`` contrasts how many images *look* confident
(top score over a threshold) with how many are actually well localized
(top IOU over the same threshold).
"""

from __future__ import annotations

from dataclasses import dataclass

from .boxes import Box, Detection, iou


@dataclass(frozen=True)
class ImageOutcome:
    """Top-detection summary for one image: its score and IOU vs GT."""

    image_id: str
    has_detection: bool
    top_score: float
    top_iou: float


def outcome(image_id: str, gt: Box, detections: list[Detection]) -> ImageOutcome:
    """Summarize one image by its highest-scoring detection."""
    if not detections:
        return ImageOutcome(image_id, False, 0.0, 0.0)
    top = max(detections, key=lambda d: d.score)
    return ImageOutcome(image_id, True, top.score, iou(top.box, gt))


def judge(gt: Box, detections: list[Detection], threshold: float, strict: bool = True) -> str:
    """'TP', 'FP', or 'FN' for one image at one IOU threshold.

    ``strict`` selects IOU > threshold (default) vs IOU >= threshold.
    """
    if not (0 < threshold < 1):
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    return judge_outcome(outcome("", gt, detections), threshold, strict)


def judge_outcome(o: ImageOutcome, threshold: float, strict: bool = True) -> str:
    if not o.has_detection:
        return "FN"
    ok = o.top_iou > threshold if strict else o.top_iou >= threshold
    return "TP" if ok else "FP"


@dataclass(frozen=True)
class CurveRow:
    iou_threshold: float
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class MetricCurve:
    rows: tuple[CurveRow, ...]


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean 2PR/(P+R); scale-invariant, so percentages work too."""
    if precision + recall <= 0:
        raise ValueError("precision + recall must be positive")
    return 2.0 * precision * recall / (precision + recall)


def curve(outcomes: list[ImageOutcome], thresholds: list[float], strict: bool = True) -> MetricCurve:
    """Aggregate judge outcomes over a threshold grid."""
    if not outcomes:
        raise ValueError("need at least one image outcome")
    if not thresholds:
        raise ValueError("threshold list is empty")
    rows = []
    for t in thresholds:
        tp = fp = fn = 0
        for o in outcomes:
            verdict = judge_outcome(o, t, strict)
            tp += verdict == "TP"
            fp += verdict == "FP"
            fn += verdict == "FN"
        accuracy = tp / (tp + fp + fn)
        precision = tp / (tp + fp) if tp + fp > 0 else None
        recall = tp / (tp + fn) if tp + fn > 0 else None
        f1 = (
            f1_score(precision, recall)
            if precision is not None and recall is not None and precision + recall > 0
            else None
        )
        rows.append(CurveRow(t, accuracy, precision, recall, f1, tp, fp, fn))
    return MetricCurve(tuple(rows))


@dataclass(frozen=True)
class ScoreIouRow:
    threshold: float
    accuracy_by_score: float | None
    accuracy_by_iou: float | None


@dataclass(frozen=True)
class ScoreIouReport:
    rows: tuple[ScoreIouRow, ...]
    pairs: tuple[tuple[str, float, float], ...]


def objectness_vs_iou_report(
    outcomes: list[ImageOutcome],
    score_thresholds: list[float],
    iou_thresholds: list[float] | None = None,
) -> ScoreIouReport:
    """Fraction of images confident-by-score vs correct-by-IOU per threshold.

    Both columns count with >= against the top detection's score and IOU
    respectively (missing detections count as 0/0). Per-image (score, IOU)
    pairs ride along for audit. A column is n/a at thresholds its grid
    does not request.
    """
    if iou_thresholds is None:
        iou_thresholds = list(score_thresholds)
    score_set = set(score_thresholds)
    iou_set = set(iou_thresholds)
    n = len(outcomes)
    rows = []
    for t in sorted(score_set | iou_set):
        by_score = sum(o.top_score >= t for o in outcomes) / n if n and t in score_set else None
        by_iou = sum(o.top_iou >= t for o in outcomes) / n if n and t in iou_set else None
        rows.append(ScoreIouRow(t, by_score, by_iou))
    pairs = tuple((o.image_id, o.top_score, o.top_iou) for o in outcomes)
    return ScoreIouReport(tuple(rows), pairs)


# ---------------------------------------------------------------------------
# rendering


def _cell(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def curve_csv(c: MetricCurve) -> str:
    lines = ["iou_threshold,accuracy,precision,recall,f1,tp,fp,fn"]
    for r in c.rows:
        lines.append(
            f"{r.iou_threshold:.4f},{r.accuracy:.4f},{_cell(r.precision)},{_cell(r.recall)},"
            f"{_cell(r.f1)},{r.tp},{r.fp},{r.fn}"
        )
    return "\n".join(lines) + "\n"


def report_csv(rep: ScoreIouReport) -> str:
    lines = ["threshold,accuracy_by_score,accuracy_by_iou"]
    for r in rep.rows:
        lines.append(f"{r.threshold:.4f},{_cell(r.accuracy_by_score)},{_cell(r.accuracy_by_iou)}")
    return "\n".join(lines) + "\n"


def pairs_csv(rep: ScoreIouReport) -> str:
    lines = ["image_id,top_score,top_iou"]
    for image_id, score, iou_val in rep.pairs:
        lines.append(f"{image_id},{score:.4f},{iou_val:.4f}")
    return "\n".join(lines) + "\n"


_SVG_SERIES = (
    ("accuracy", "#1f77b4"),
    ("precision", "#d62728"),
    ("recall", "#2ca02c"),
    ("f1", "#9467bd"),
)


def curve_svg(c: MetricCurve, title: str = "detection metrics vs IOU threshold") -> str:
    """Hand-written SVG line chart of the metric curve (no dependencies)."""
    width, height = 640, 420
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    ts = [r.iou_threshold for r in c.rows]
    t_lo, t_hi = min(ts), max(ts)
    t_span = (t_hi - t_lo) or 1.0

    def px(t: float) -> float:
        return left + (t - t_lo) / t_span * pw

    def py(v: float) -> float:
        return top + (1.0 - v) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        parts.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#eee"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end">{frac:.2f}</text>')
    for t in ts:
        x = px(t)
        parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 4}" stroke="#999"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle">{t:.2f}</text>')
    parts.append(
        f'<text x="{left + pw / 2:.0f}" y="{height - 12}" text-anchor="middle">IOU threshold</text>'
    )
    for name, color in _SVG_SERIES:
        segment: list[str] = []
        for r in c.rows:
            v = getattr(r, name)
            if v is None:
                if len(segment) >= 2:
                    parts.append(
                        f'<polyline points="{" ".join(segment)}" fill="none" stroke="{color}" stroke-width="2"/>'
                    )
                segment = []
            else:
                segment.append(f"{px(r.iou_threshold):.1f},{py(v):.1f}")
        if len(segment) >= 2:
            parts.append(f'<polyline points="{" ".join(segment)}" fill="none" stroke="{color}" stroke-width="2"/>')
        elif len(segment) == 1:
            x, y = segment[0].split(",")
            parts.append(f'<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>')
    for i, (name, color) in enumerate(_SVG_SERIES):
        lx, ly = left + 10 + i * 110, top + 14
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" stroke-width="3"/>')
        parts.append(f'<text x="{lx + 24}" y="{ly}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
