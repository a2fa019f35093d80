"""Box conversions, IoU, and NMS, checked against independent oracles."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxprompt.geometry import (
    BoxCXCYWH,
    BoxXYXY,
    DegenerateBoxError,
    Detection,
    ImageDims,
    box_iou,
    clip_box,
    nms,
    to_absolute,
    to_normalized,
)


def grid_iou(a: BoxXYXY, b: BoxXYXY, cells: int = 3000) -> float:
    """Rasterization oracle: count fine grid cells whose centers fall in
    each box."""
    lo_x = min(a.x1, b.x1)
    hi_x = max(a.x2, b.x2)
    lo_y = min(a.y1, b.y1)
    hi_y = max(a.y2, b.y2)
    xs = lo_x + (np.arange(cells) + 0.5) * (hi_x - lo_x) / cells
    ys = lo_y + (np.arange(cells) + 0.5) * (hi_y - lo_y) / cells
    xx, yy = np.meshgrid(xs, ys)
    in_a = (xx >= a.x1) & (xx <= a.x2) & (yy >= a.y1) & (yy <= a.y2)
    in_b = (xx >= b.x1) & (xx <= b.x2) & (yy >= b.y1) & (yy <= b.y2)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


class TestBoxTypes:
    def test_xyxy_rejects_reversed_corners(self):
        with pytest.raises(ValueError):
            BoxXYXY(5, 0, 1, 2)

    def test_xyxy_rejects_non_finite(self):
        with pytest.raises(ValueError):
            BoxXYXY(0, 0, float("inf"), 1)

    def test_dims_must_be_positive(self):
        with pytest.raises(ValueError):
            ImageDims(0, 4)

    def test_normalized_must_stay_in_unit_square(self):
        with pytest.raises(ValueError):
            BoxCXCYWH(cx=0.9, cy=0.5, w=0.5, h=0.5)

    def test_detection_score_range(self):
        with pytest.raises(ValueError):
            Detection(BoxXYXY(0, 0, 1, 1), 1.5)


class TestToNormalized:
    def test_hand_derived_example(self):
        # independent hand arithmetic
        expected = (
            (60 + 385) / (2 * 500),
            (27 + 331) / (2 * 375),
            (385 - 60) / 500,
            (331 - 27) / 375,
        )
        got = to_normalized(BoxXYXY(60, 27, 385, 331), ImageDims(500, 375))
        assert (got.cx, got.cy, got.w, got.h) == pytest.approx(expected, abs=1e-12)
        assert got.cx == pytest.approx(0.445, abs=1e-12)
        assert got.w == pytest.approx(0.65, abs=1e-12)

    def test_full_image_box(self):
        got = to_normalized(BoxXYXY(0, 0, 640, 480), ImageDims(640, 480))
        assert (got.cx, got.cy, got.w, got.h) == (0.5, 0.5, 1.0, 1.0)

    def test_degenerate_box_rejected_naming_image(self):
        with pytest.raises(DegenerateBoxError, match="4711"):
            to_normalized(BoxXYXY(10, 10, 10, 20), ImageDims(100, 100), image_id=4711)

    def test_box_outside_image_becomes_degenerate(self):
        with pytest.raises(DegenerateBoxError):
            to_normalized(BoxXYXY(200, 200, 300, 300), ImageDims(100, 100))

    @given(
        x1=st.floats(0, 90),
        y1=st.floats(0, 90),
        w=st.floats(0.5, 10),
        h=st.floats(0.5, 10),
    )
    @settings(max_examples=200)
    def test_round_trip_identity(self, x1, y1, w, h):
        dims = ImageDims(100, 100)
        box = BoxXYXY(x1, y1, x1 + w, y1 + h)
        back = to_absolute(to_normalized(box, dims), dims)
        assert back.x1 == pytest.approx(box.x1, abs=1e-9)
        assert back.y1 == pytest.approx(box.y1, abs=1e-9)
        assert back.x2 == pytest.approx(box.x2, abs=1e-9)
        assert back.y2 == pytest.approx(box.y2, abs=1e-9)


class TestBoxIoU:
    def test_identical(self):
        b = BoxXYXY(3, 4, 10, 12)
        assert box_iou(b, b) == 1.0

    def test_disjoint(self):
        assert box_iou(BoxXYXY(0, 0, 1, 1), BoxXYXY(5, 5, 6, 6)) == 0.0

    def test_one_seventh_overlap(self):
        a = BoxXYXY(0, 0, 2, 2)
        b = BoxXYXY(1, 1, 3, 3)
        got = box_iou(a, b)
        assert got == pytest.approx(1 / 7, abs=1e-12)
        assert got == pytest.approx(grid_iou(a, b), abs=1e-3)

    def test_degenerate_boxes_never_overlap(self):
        line = BoxXYXY(0, 0, 0, 10)
        assert box_iou(line, line) == 0.0
        assert box_iou(line, BoxXYXY(0, 0, 5, 5)) == 0.0

    @given(
        ax=st.floats(0, 50), ay=st.floats(0, 50), aw=st.floats(0, 20), ah=st.floats(0, 20),
        bx=st.floats(0, 50), by=st.floats(0, 50), bw=st.floats(0, 20), bh=st.floats(0, 20),
    )
    @settings(max_examples=300)
    def test_symmetric_and_bounded(self, ax, ay, aw, ah, bx, by, bw, bh):
        a = BoxXYXY(ax, ay, ax + aw, ay + ah)
        b = BoxXYXY(bx, by, bx + bw, by + bh)
        iou = box_iou(a, b)
        assert iou == box_iou(b, a)
        assert 0.0 <= iou <= 1.0

    @given(
        ax=st.floats(0, 50), ay=st.floats(0, 50),
        aw=st.floats(0.5, 20), ah=st.floats(0.5, 20),
        dx=st.floats(-5, 5), dy=st.floats(-5, 5),
    )
    @settings(max_examples=300)
    def test_equals_one_iff_identical(self, ax, ay, aw, ah, dx, dy):
        a = BoxXYXY(ax, ay, ax + aw, ay + ah)
        b = BoxXYXY(ax + dx, ay + dy, ax + aw + dx, ay + ah + dy)
        if dx == 0 and dy == 0:
            assert box_iou(a, b) == 1.0
        elif abs(dx) > 1e-9 or abs(dy) > 1e-9:
            assert box_iou(a, b) < 1.0


def brute_force_nms(dets: list[Detection], threshold: float) -> list[Detection]:
    """All-pairs re-derivation of the greedy keep rule."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept_idx: list[int] = []
    for i in order:
        ok = True
        for j in kept_idx:
            if box_iou(dets[i].box, dets[j].box) > threshold:
                ok = False
        if ok:
            kept_idx.append(i)
    return [dets[i] for i in kept_idx]


def random_detections(rng: np.random.Generator, n: int) -> list[Detection]:
    dets = []
    for _ in range(n):
        x1 = rng.uniform(0, 80)
        y1 = rng.uniform(0, 80)
        dets.append(
            Detection(
                BoxXYXY(x1, y1, x1 + rng.uniform(1, 30), y1 + rng.uniform(1, 30)),
                float(rng.uniform(0, 1)),
            )
        )
    return dets


class TestNMS:
    def test_single_detection(self):
        d = Detection(BoxXYXY(0, 0, 10, 10), 0.7)
        assert nms([d], 0.45) == [d]

    def test_empty(self):
        assert nms([], 0.45) == []

    def test_suppression_example(self):
        a = Detection(BoxXYXY(0, 0, 10, 10), 0.9)
        b = Detection(BoxXYXY(1, 1, 10, 10), 0.8)
        assert box_iou(a.box, b.box) == pytest.approx(81 / 100)
        assert nms([b, a], 0.45) == [a]
        assert nms([b, a], 0.45) == brute_force_nms([b, a], 0.45)

    def test_disjoint_kept_in_score_order(self):
        lo = Detection(BoxXYXY(0, 0, 5, 5), 0.3)
        hi = Detection(BoxXYXY(50, 50, 60, 60), 0.9)
        assert nms([lo, hi], 0.45) == [hi, lo]

    def test_score_tie_broken_by_input_index(self):
        first = Detection(BoxXYXY(0, 0, 10, 10), 0.8, "first")
        second = Detection(BoxXYXY(0, 0, 10, 10), 0.8, "second")
        assert nms([first, second], 0.45) == [first]

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            dets = random_detections(rng, int(rng.integers(0, 10)))
            thr = float(rng.uniform(0.1, 0.9))
            assert nms(dets, thr) == brute_force_nms(dets, thr)

    def test_output_subset_pairwise_clean_idempotent(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            dets = random_detections(rng, int(rng.integers(2, 12)))
            thr = float(rng.uniform(0.2, 0.8))
            out = nms(dets, thr)
            assert all(d in dets for d in out)
            for i, a in enumerate(out):
                for b in out[i + 1 :]:
                    assert box_iou(a.box, b.box) <= thr
            assert nms(out, thr) == out


class TestClip:
    def test_clip_keeps_inside_box(self):
        b = BoxXYXY(2, 3, 8, 9)
        assert clip_box(b, ImageDims(10, 10)) == b

    def test_clip_overshoot(self):
        assert clip_box(BoxXYXY(-5, -1, 12, 9), ImageDims(10, 8)) == BoxXYXY(0, 0, 10, 8)
