"""Built-in oracle/perturbation backends and the external protocol clients."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

from boxprompt.backends import (
    BackendError,
    BoxFillSegmenter,
    DetectorConfig,
    ExternalProcessBackend,
    MaskCandidate,
    OracleDetector,
    OracleSegmenter,
    PerturbedDetector,
    PrecomputedBackend,
    SegmentRequest,
    detect,
    perturb_boxes,
    resolve_detector,
    resolve_segmenter,
    segment,
    select_candidate,
)
from boxprompt.dataset import load_index
from boxprompt.geometry import BoxXYXY, Detection, ImageDims, box_iou
from boxprompt.mask import all_background, load_mask, rle_encode

from conftest import write_image, write_mask_png

ECHO_CMD = f"{sys.executable} {Path(__file__).parent / 'fixtures' / 'echo_backend.py'}"


@pytest.fixture
def two_instance_root(tmp_path):
    """One image whose mask has two separate rectangular components."""
    root = tmp_path / "data"
    write_image(root / "images" / "a" / "one.png", width=32, height=24)
    write_mask_png(
        root / "segmentations" / "a" / "one.png",
        width=32,
        height=24,
        boxes=((2, 3, 8, 9), (20, 12, 28, 20)),
    )
    (root / "images.txt").write_text("1 a/one.png\n")
    (root / "bounding_boxes.txt").write_text("1 2.0 3.0 26.0 17.0\n")
    (root / "image_class_labels.txt").write_text("1 1\n")
    return root


class TestOracleDetector:
    def test_two_instances_two_exact_detections(self, two_instance_root):
        index = load_index(two_instance_root)
        rec = index.get(1)
        dets = detect(OracleDetector(two_instance_root), rec, DetectorConfig())
        assert [d.box for d in dets] == [BoxXYXY(2, 3, 8, 9), BoxXYXY(20, 12, 28, 20)]
        assert all(d.score == 1.0 for d in dets)
        assert all(d.label == "bird" for d in dets)

    def test_annotation_source_uses_record_box(self, two_instance_root):
        index = load_index(two_instance_root)
        rec = index.get(1)
        dets = detect(OracleDetector(two_instance_root, source="annotation"), rec, DetectorConfig())
        assert [d.box for d in dets] == [rec.gt_box]

    def test_unknown_source_rejected(self, two_instance_root):
        with pytest.raises(ValueError):
            OracleDetector(two_instance_root, source="psychic")


class TestDetectPostProcessing:
    class FakeDetector:
        identity = "fake"

        def __init__(self, dets):
            self.dets = dets

        def detect_raw(self, record, config):
            return list(self.dets)

    def rec(self, root):
        return load_index(root).get(1)

    def test_supervised_conf_threshold(self, two_instance_root):
        dets = [
            Detection(BoxXYXY(0, 0, 5, 5), 0.9),
            Detection(BoxXYXY(10, 10, 15, 15), 0.3),
        ]
        config = DetectorConfig(mode="supervised", conf_threshold=0.40)
        out = detect(self.FakeDetector(dets), self.rec(two_instance_root), config)
        assert [d.score for d in out] == [0.9]

    def test_supervised_applies_nms(self, two_instance_root):
        dets = [
            Detection(BoxXYXY(1, 1, 10, 10), 0.8),
            Detection(BoxXYXY(0, 0, 10, 10), 0.9),
        ]
        config = DetectorConfig(mode="supervised", conf_threshold=0.4, nms_iou=0.45)
        out = detect(self.FakeDetector(dets), self.rec(two_instance_root), config)
        assert [d.score for d in out] == [0.9]

    def test_grounded_only_sorts(self, two_instance_root):
        dets = [
            Detection(BoxXYXY(1, 1, 10, 10), 0.2),
            Detection(BoxXYXY(0, 0, 10, 10), 0.9),
        ]
        out = detect(self.FakeDetector(dets), self.rec(two_instance_root), DetectorConfig())
        assert [d.score for d in out] == [0.9, 0.2]

    def test_strictly_greater_than_threshold(self, two_instance_root):
        dets = [Detection(BoxXYXY(0, 0, 5, 5), 0.40)]
        config = DetectorConfig(mode="supervised", conf_threshold=0.40)
        assert detect(self.FakeDetector(dets), self.rec(two_instance_root), config) == []


class TestPerturbBoxes:
    def dets(self):
        return [
            Detection(BoxXYXY(10, 10, 40, 40), 1.0),
            Detection(BoxXYXY(50, 50, 90, 90), 1.0),
        ]

    def test_all_neutral_is_identity(self):
        dets = self.dets()
        assert perturb_boxes(dets, seed=1) == dets

    def test_drop_all(self):
        assert perturb_boxes(self.dets(), drop_rate=1.0, seed=1) == []

    def test_deterministic_under_seed(self):
        a = perturb_boxes(self.dets(), jitter_px=3, drop_rate=0.5, seed=42, dims=ImageDims(100, 100))
        b = perturb_boxes(self.dets(), jitter_px=3, drop_rate=0.5, seed=42, dims=ImageDims(100, 100))
        assert a == b

    def test_jitter_iou_lower_bound(self):
        # worst-case geometry for +-2 px jitter of a 100x100 box,
        # verified by brute-force sampling
        bound = (96 * 96) / (104 * 104)
        original = Detection(BoxXYXY(100, 100, 200, 200), 1.0)
        dims = ImageDims(400, 400)
        for seed in range(500):
            (moved,) = perturb_boxes([original], jitter_px=2, seed=seed, dims=dims)
            assert box_iou(original.box, moved.box) >= bound

    def test_scale_about_center(self):
        (out,) = perturb_boxes([Detection(BoxXYXY(10, 10, 30, 30), 1.0)], scale_factor=0.5, seed=0)
        assert out.box == BoxXYXY(15, 15, 25, 25)

    def test_fp_injection_scores_below_true_minimum(self):
        dets = [Detection(BoxXYXY(10, 10, 40, 40), 0.8)]
        out = perturb_boxes(dets, fp_rate=1.0, seed=3, dims=ImageDims(100, 100))
        assert len(out) == 2
        injected = out[1]
        assert injected.score < 0.8

    def test_fp_requires_dims(self):
        with pytest.raises(ValueError, match="dims"):
            perturb_boxes(self.dets(), fp_rate=0.5, seed=1)

    def test_perturbed_detector_sigma_zero_equals_oracle(self, two_instance_root):
        index = load_index(two_instance_root)
        rec = index.get(1)
        oracle = OracleDetector(two_instance_root)
        wrapped = PerturbedDetector(oracle, seed=99)
        config = DetectorConfig()
        assert detect(wrapped, rec, config) == detect(oracle, rec, config)


class TestSegmenters:
    def test_oracle_segmenter_gt_box_returns_gt_mask(self, tmp_path):
        root = tmp_path / "data"
        write_image(root / "images" / "a" / "one.png", width=20, height=16)
        write_mask_png(root / "segmentations" / "a" / "one.png", boxes=((4, 3, 9, 8),))
        (root / "images.txt").write_text("1 a/one.png\n")
        (root / "bounding_boxes.txt").write_text("1 4.0 3.0 5.0 5.0\n")
        (root / "image_class_labels.txt").write_text("1 1\n")
        index = load_index(root)
        rec = index.get(1)
        gt = load_mask(rec.mask_path(root))
        out = segment(OracleSegmenter(root), SegmentRequest(rec, (rec.gt_box,)))
        assert out[0].mask == gt

    def test_boxfill_pixel_count_equals_box_area(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        box = BoxXYXY(3, 2, 13, 10)
        out = segment(BoxFillSegmenter(), SegmentRequest(rec, (box,)))
        assert out[0].mask.foreground_area == 10 * 8

    def test_zero_boxes_empty_list(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        assert segment(OracleSegmenter(two_instance_root), SegmentRequest(rec, ())) == []

    def test_count_mismatch_is_typed_error(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)

        class ShortSegmenter:
            identity = "short"

            def segment_candidates(self, record, boxes):
                return []

        with pytest.raises(BackendError, match="mask groups"):
            segment(ShortSegmenter(), SegmentRequest(rec, (BoxXYXY(0, 0, 4, 4),)))

    def test_non_native_resolution_rejected(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)

        class WrongDims:
            identity = "wrong-dims"

            def segment_candidates(self, record, boxes):
                return [[MaskCandidate(all_background(ImageDims(8, 8)), 1.0)] for _ in boxes]

        with pytest.raises(BackendError, match="native"):
            segment(WrongDims(), SegmentRequest(rec, (BoxXYXY(0, 0, 4, 4),)))

    def test_selection_highest_confidence_ties_first(self):
        lo = MaskCandidate(all_background(ImageDims(2, 2)), 0.4)
        hi_a = MaskCandidate(rle_encode(np.ones((2, 2), dtype=bool)), 0.9)
        hi_b = MaskCandidate(all_background(ImageDims(2, 2)), 0.9)
        assert select_candidate([lo, hi_a, hi_b], "highest-confidence") is hi_a
        assert select_candidate([lo, hi_a, hi_b], "first") is lo

    def test_prompt_box_outside_image_rejected(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        with pytest.raises(ValueError, match="outside image"):
            SegmentRequest(rec, (BoxXYXY(0, 0, 100, 100),))


class TestExternalProcessBackend:
    def test_detect_round_trip(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        with ExternalProcessBackend(ECHO_CMD, two_instance_root) as backend:
            dets = backend.detect_raw(rec, DetectorConfig())
        assert dets == [Detection(BoxXYXY(2, 2, 10, 10), 0.875, "bird")]

    def test_segment_round_trip_box_fill(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        box = BoxXYXY(1, 1, 9, 7)
        with ExternalProcessBackend(ECHO_CMD, two_instance_root) as backend:
            out = segment(backend, SegmentRequest(rec, (box,)))
        assert out[0].mask.dims == rec.dims
        assert out[0].mask.foreground_area == 8 * 6
        # agrees with the in-process box-fill segmenter bit-exactly
        ours = segment(BoxFillSegmenter(), SegmentRequest(rec, (box,)))
        assert out[0].mask == ours[0].mask

    def test_sidecar_detections_override(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        sidecar = Path(str(rec.image_path(two_instance_root)) + ".det.json")
        sidecar.write_text(
            json.dumps(
                {"detections": [{"box": [5, 6, 7, 8], "score": 0.5, "label": "x"}]}
            )
        )
        with ExternalProcessBackend(ECHO_CMD, two_instance_root) as backend:
            dets = backend.detect_raw(rec, DetectorConfig())
        assert dets == [Detection(BoxXYXY(5, 6, 7, 8), 0.5, "x")]

    def test_error_reply_raises_typed_error(self, two_instance_root):
        with ExternalProcessBackend(ECHO_CMD, two_instance_root) as backend:
            with pytest.raises(BackendError, match="unknown op"):
                backend.request({"op": "transmogrify"})

    def test_dead_process_raises_with_identity(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        backend = ExternalProcessBackend(f"{sys.executable} -c pass", two_instance_root, name="dying")
        with pytest.raises(BackendError, match="dying"):
            backend.detect_raw(rec, DetectorConfig())
        backend.close()

    def test_malformed_reply_raises(self, two_instance_root):
        rec = load_index(two_instance_root).get(1)
        cmd = f"{sys.executable} -c \"print('not json'); import sys; sys.stdout.flush(); sys.stdin.read()\""
        backend = ExternalProcessBackend(cmd, two_instance_root)
        with pytest.raises(BackendError, match="not valid JSON"):
            backend.detect_raw(rec, DetectorConfig())
        backend.close()


class TestPrecomputedBackend:
    def test_reads_reply_files(self, two_instance_root, tmp_path):
        rec = load_index(two_instance_root).get(1)
        replies = tmp_path / "replies"
        replies.mkdir()
        (replies / "1.det").write_text(
            json.dumps({"detections": [{"box": [2, 3, 8, 9], "score": 1.0, "label": "bird"}]})
        )
        grid = np.zeros((24, 32), dtype=bool)
        grid[3:9, 2:8] = True
        m = rle_encode(grid)
        (replies / "1.seg").write_text(
            json.dumps({"masks": [{"dims": [32, 24], "rle": list(m.counts), "score": 1.0}]})
        )
        backend = PrecomputedBackend(replies, two_instance_root)
        dets = backend.detect_raw(rec, DetectorConfig())
        assert dets[0].box == BoxXYXY(2, 3, 8, 9)
        out = segment(backend, SegmentRequest(rec, (dets[0].box,)))
        assert out[0].mask == m

    def test_missing_reply_file(self, two_instance_root, tmp_path):
        rec = load_index(two_instance_root).get(1)
        backend = PrecomputedBackend(tmp_path / "empty", two_instance_root)
        with pytest.raises(BackendError, match="missing reply file"):
            backend.detect_raw(rec, DetectorConfig())


class TestSpecResolution:
    def test_oracle_specs(self, two_instance_root):
        det = resolve_detector("oracle:source=annotation,min_area=4", two_instance_root)
        assert isinstance(det, OracleDetector)
        assert det.source == "annotation"
        assert det.min_area == 4
        assert isinstance(resolve_segmenter("oracle", two_instance_root), OracleSegmenter)
        assert isinstance(resolve_segmenter("boxfill", two_instance_root), BoxFillSegmenter)

    def test_perturbed_spec_with_default_seed(self, two_instance_root):
        det = resolve_detector("perturbed:jitter_px=4,drop_rate=0.3", two_instance_root, default_seed=17)
        assert isinstance(det, PerturbedDetector)
        assert det.jitter_px == 4.0
        assert det.drop_rate == 0.3
        assert det.seed == 17

    def test_explicit_seed_wins(self, two_instance_root):
        det = resolve_detector("perturbed:seed=5", two_instance_root, default_seed=17)
        assert det.seed == 5

    def test_external_spec_is_factory(self, two_instance_root):
        factory = resolve_detector(f"external:{ECHO_CMD}", two_instance_root)
        assert callable(factory)
        backend = factory()
        assert isinstance(backend, ExternalProcessBackend)
        backend.close()

    def test_unknown_kind(self, two_instance_root):
        with pytest.raises(ValueError, match="unknown detector backend"):
            resolve_detector("quantum", two_instance_root)
        with pytest.raises(ValueError, match="unknown segmenter backend"):
            resolve_segmenter("quantum", two_instance_root)

    def test_bad_option_format(self, two_instance_root):
        with pytest.raises(ValueError, match="key=value"):
            resolve_detector("oracle:nonsense", two_instance_root)
