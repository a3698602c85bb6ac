"""Box geometry: IOU against a unit-cell counting oracle, anchors, NMS."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earloc.boxes import (
    Anchor,
    AnchorLevelConfig,
    Box,
    CenterBox,
    Detection,
    InvalidBoxError,
    anchor_array,
    clip_box,
    decode,
    decode_array,
    encode,
    encode_array,
    generate_anchors,
    grid_shape,
    iou,
    iou_matrix,
    nms,
)


def iou_cells(a: Box, b: Box) -> Fraction:
    """Exact IOU for integer-coordinate boxes by counting unit cells."""

    def cells(box):
        return {
            (x, y)
            for x in range(int(box.x_min), int(box.x_max))
            for y in range(int(box.y_min), int(box.y_max))
        }

    ca, cb = cells(a), cells(b)
    union = len(ca | cb)
    return Fraction(len(ca & cb), union)


def random_int_box(rng, span=40):
    x0 = int(rng.integers(0, span))
    y0 = int(rng.integers(0, span))
    w = int(rng.integers(1, 20))
    h = int(rng.integers(1, 20))
    return Box(float(x0), float(y0), float(x0 + w), float(y0 + h))


class TestBox:
    def test_dimensions(self):
        b = Box(1.0, 2.0, 4.0, 8.0)
        assert (b.width, b.height, b.area) == (3.0, 6.0, 18.0)

    def test_rejects_empty(self):
        with pytest.raises(InvalidBoxError):
            Box(0, 0, 0, 5)
        with pytest.raises(InvalidBoxError):
            Box(3, 1, 2, 2)

    def test_center_round_trip(self):
        b = Box(10.0, 20.0, 30.0, 60.0)
        c = b.to_center()
        assert c == CenterBox(20.0, 40.0, 20.0, 40.0)
        assert c.to_box() == b

    def test_as_array(self):
        np.testing.assert_array_equal(Box(1, 2, 3, 4).as_array(), [1.0, 2.0, 3.0, 4.0])


class TestIou:
    def test_identical(self):
        b = Box(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint_is_zero(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou(Box(0, 0, 2, 2), Box(2, 0, 4, 2)) == 0.0

    def test_half_overlap(self):
        # 1x2 overlap of two 2x2 boxes: 2 / (4 + 4 - 2)
        assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(2 / 6, abs=1e-15)

    def test_symmetry(self, rng):
        for _ in range(50):
            a, b = random_int_box(rng), random_int_box(rng)
            assert iou(a, b) == iou(b, a)

    def test_matches_cell_oracle(self, rng):
        for _ in range(1000):
            a, b = random_int_box(rng), random_int_box(rng)
            assert abs(iou(a, b) - float(iou_cells(a, b))) < 1e-12

    def test_matrix_agrees_with_scalar(self, rng):
        boxes_a = [random_int_box(rng) for _ in range(7)]
        boxes_b = [random_int_box(rng) for _ in range(5)]
        m = iou_matrix(
            np.array([b.as_array() for b in boxes_a]),
            np.array([b.as_array() for b in boxes_b]),
        )
        for i, a in enumerate(boxes_a):
            for j, b in enumerate(boxes_b):
                assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)

    @given(
        st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30),
        st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30),
    )
    @settings(max_examples=60, deadline=None)
    def test_range_property(self, x0, y0, w0, h0, x1, y1, w1, h1):
        a = Box(x0, y0, x0 + w0, y0 + h0)
        b = Box(x1, y1, x1 + w1, y1 + h1)
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(float(iou_cells(a, b)), abs=1e-12)


class TestAnchors:
    def test_grid_shape(self):
        assert grid_shape(320, 320, 8.0) == (40, 40)
        assert grid_shape(160, 160, 32.0) == (5, 5)

    def test_count_and_order(self):
        cfg = AnchorLevelConfig("mid", 8.0, (40.0, 64.0))
        anchors = generate_anchors(320, 320, cfg)
        assert len(anchors) == 40 * 40 * 2
        # row-major cells, slots innermost
        assert anchors[0].cell == (0, 0) and anchors[0].slot == 0
        assert anchors[1].cell == (0, 0) and anchors[1].slot == 1
        assert anchors[2].cell == (0, 1) and anchors[2].slot == 0
        assert anchors[80].cell == (1, 0)

    def test_centers_and_sizes(self):
        cfg = AnchorLevelConfig("deep", 16.0, (80.0,))
        anchors = generate_anchors(320, 320, cfg)
        first = anchors[0].box.to_center()
        assert (first.c_x, first.c_y) == (8.0, 8.0)
        assert (first.w, first.h) == (80.0, 80.0)

    def test_aspect_ratios_preserve_area(self):
        cfg = AnchorLevelConfig("mid", 8.0, (40.0,), ratios=(0.5, 1.0, 2.0))
        for w, h in cfg.slot_sizes():
            assert w * h == pytest.approx(40.0 * 40.0, rel=1e-12)
        ws = [w for w, _ in cfg.slot_sizes()]
        assert ws[0] < ws[1] < ws[2]

    def test_determinism(self):
        cfg = AnchorLevelConfig("mid", 8.0, (40.0, 64.0))
        a1 = generate_anchors(320, 320, cfg)
        a2 = generate_anchors(320, 320, cfg)
        assert a1 == a2

    def test_anchor_array_matches(self):
        cfg = AnchorLevelConfig("mid", 16.0, (32.0,))
        anchors = generate_anchors(64, 64, cfg)
        arr = anchor_array(anchors)
        assert arr.shape == (len(anchors), 4)
        for row, a in zip(arr, anchors):
            np.testing.assert_allclose(row, a.box.as_array(), atol=1e-12)


class TestEncodeDecode:
    def test_round_trip(self, rng):
        anchor = Box(10.0, 20.0, 50.0, 60.0)
        for _ in range(100):
            b = random_int_box(rng)
            back = decode(encode(b, anchor), anchor)
            np.testing.assert_allclose(back.as_array(), b.as_array(), atol=1e-9)

    def test_zero_offsets_reproduce_anchor(self):
        anchor = Box(4.0, 4.0, 36.0, 28.0)
        back = decode(np.zeros(4), anchor)
        assert back.as_array() == pytest.approx(anchor.as_array())

    def test_known_values(self):
        # anchor 10x10 at origin-corner; GT shifted by +5 and twice the size
        anchor = Box(0.0, 0.0, 10.0, 10.0)
        gt = Box(0.0, 0.0, 20.0, 20.0)
        off = encode(gt, anchor)
        np.testing.assert_allclose(off, [0.5, 0.5, np.log(2.0), np.log(2.0)], atol=1e-12)

    def test_array_forms_agree(self, rng):
        anchors = np.array([random_int_box(rng).as_array() for _ in range(20)])
        gts = np.array([random_int_box(rng).as_array() for _ in range(20)])
        enc = encode_array(gts, anchors)
        for i in range(20):
            np.testing.assert_allclose(enc[i], encode(Box(*gts[i]), Box(*anchors[i])), atol=1e-12)
        dec = decode_array(enc, anchors)
        np.testing.assert_allclose(dec, gts, atol=1e-9)

    def test_decode_rejects_non_finite(self):
        with pytest.raises(ValueError):
            decode(np.array([np.nan, 0.0, 0.0, 0.0]), Box(0.0, 0.0, 10.0, 10.0))


class TestClip:
    def test_inside_unchanged(self):
        b = Box(5, 5, 10, 10)
        assert clip_box(b, 20, 20) == b

    def test_clamps_to_image(self):
        b = clip_box(Box(-5.0, -3.0, 25.0, 18.0), 20, 15)
        assert b.as_array() == pytest.approx([0.0, 0.0, 20.0, 15.0])

    def test_outside_box_keeps_sliver(self):
        b = clip_box(Box(30.0, 5.0, 40.0, 10.0), 20, 20)
        assert b.x_max == 20.0 and b.x_min < 20.0
        assert b.area > 0


def nms_reference(dets: list[Detection], threshold: float) -> list[Detection]:
    """Greedy suppression, spelled out step by step.

    1. Sort candidates by score, highest first (stable on ties).
    2. Take the highest-scoring remaining candidate and keep it.
    3. Remove every remaining candidate whose IOU with it exceeds the
       threshold.
    4. Repeat from step 2 until no candidates remain.
    5. Return the kept detections in the order they were selected.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    remaining = list(order)
    kept: list[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(dets[best])
        remaining = [i for i in remaining if iou(dets[i].box, dets[best].box) <= threshold]
    return kept


class TestNms:
    def test_keeps_distant_boxes(self):
        dets = [
            Detection(Box(0, 0, 10, 10), 0.9),
            Detection(Box(100, 100, 110, 110), 0.8),
        ]
        assert nms(dets, 0.5) == dets

    def test_suppresses_heavy_overlap(self):
        dets = [
            Detection(Box(0, 0, 10, 10), 0.9),
            Detection(Box(1, 1, 11, 11), 0.95),
        ]
        kept = nms(dets, 0.5)
        assert len(kept) == 1 and kept[0].score == 0.95

    def test_exact_threshold_survives(self):
        # IOU exactly at the threshold is NOT suppressed (strictly-greater rule)
        a = Detection(Box(0, 0, 2, 2), 0.9)
        b = Detection(Box(1, 0, 3, 2), 0.8)  # IOU = 1/3
        kept = nms([a, b], 1 / 3)
        assert len(kept) == 2

    def test_tie_break_stable_by_index(self):
        dets = [
            Detection(Box(0, 0, 10, 10), 0.7),
            Detection(Box(0.5, 0.5, 10.5, 10.5), 0.7),
        ]
        kept = nms(dets, 0.5)
        assert kept[0] is dets[0]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_matches_reference_on_random_sets(self, rng):
        for trial in range(100):
            n = int(rng.integers(1, 201))
            dets = []
            for _ in range(n):
                b = random_int_box(rng, span=60)
                score = float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9]))  # force ties
                dets.append(Detection(b, score))
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            assert nms(dets, thr) == nms_reference(dets, thr)
