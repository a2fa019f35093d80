"""Detect, prompt-segment, aggregate: the two-stage run over images.

``run_image`` orchestrates one image; ``run_split`` fans out over a
split with a bounded worker pool while keeping results deterministic:
output is ordered by image id regardless of execution order, and
built-in backends derive per-image seeds, so any parallelism degree
yields identical serialized results.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .backends import DetectorConfig, SegmentRequest, backend_identity, detect, segment
from .dataset import DatasetIndex, ImageRecord
from .geometry import Detection, clip_box
from .mask import BinaryMask, mask_to_payload, union

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    aggregation: str = "union"
    selection: str = "highest-confidence"
    timing: bool = True

    def __post_init__(self) -> None:
        if self.aggregation not in ("union", "per-instance"):
            raise ValueError(f"aggregation must be 'union' or 'per-instance', got {self.aggregation!r}")

    def to_dict(self) -> dict:
        return {
            "detector": {
                "mode": self.detector.mode,
                "text_prompt": self.detector.text_prompt,
                "box_threshold": self.detector.box_threshold,
                "text_threshold": self.detector.text_threshold,
                "conf_threshold": self.detector.conf_threshold,
                "nms_iou": self.detector.nms_iou,
            },
            "aggregation": self.aggregation,
            "selection": self.selection,
            "timing": self.timing,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        det = data.get("detector", {})
        return cls(
            detector=DetectorConfig(**det),
            aggregation=data.get("aggregation", "union"),
            selection=data.get("selection", "highest-confidence"),
            timing=data.get("timing", True),
        )


@dataclass(frozen=True)
class StageTimings:
    detect_ms: float = 0.0
    segment_ms: float = 0.0
    total_ms: float = 0.0

    @property
    def overhead_ms(self) -> float:
        """Whatever the stage clocks did not see (aggregation, transfer)."""
        return self.total_ms - self.detect_ms - self.segment_ms


@dataclass(frozen=True)
class PipelineResult:
    image_id: int
    detections: tuple[Detection, ...]
    instance_masks: tuple[BinaryMask, ...]
    aggregate_mask: BinaryMask
    timings: StageTimings
    aggregation: str

    @property
    def n_detections(self) -> int:
        return len(self.detections)


@dataclass(frozen=True)
class ImageFailure:
    image_id: int
    error: str


@dataclass
class SplitRunResult:
    results: list[PipelineResult]
    failures: list[ImageFailure]


def run_image(record: ImageRecord, config: PipelineConfig, detector, segmenter) -> PipelineResult:
    """Run the two-stage pipeline on one image.

    Zero detections is a recorded no-detection outcome (all-background
    aggregate), not an error. Backend errors propagate with the image id
    attached.
    """
    t0 = time.perf_counter_ns()
    try:
        detections = detect(detector, record, config.detector)
        t1 = time.perf_counter_ns()
        prompt_boxes = tuple(clip_box(d.box, record.dims) for d in detections)
        request = SegmentRequest(record=record, boxes=prompt_boxes)
        candidates = segment(segmenter, request, selection=config.selection)
        t2 = time.perf_counter_ns()
        instance_masks = tuple(c.mask for c in candidates)
        aggregate = union(list(instance_masks), dims=record.dims)
        t3 = time.perf_counter_ns()
    except Exception as exc:
        raise PipelineImageError(record.image_id, exc) from exc

    if config.timing:
        timings = StageTimings(
            detect_ms=(t1 - t0) / 1e6,
            segment_ms=(t2 - t1) / 1e6,
            total_ms=(t3 - t0) / 1e6,
        )
    else:
        timings = StageTimings()
    return PipelineResult(
        image_id=record.image_id,
        detections=tuple(detections),
        instance_masks=instance_masks,
        aggregate_mask=aggregate,
        timings=timings,
        aggregation=config.aggregation,
    )


class PipelineImageError(RuntimeError):
    def __init__(self, image_id: int, cause: Exception):
        super().__init__(f"image {image_id}: {cause}")
        self.image_id = image_id
        self.cause = cause


def _is_factory(backend) -> bool:
    return callable(backend) and not hasattr(backend, "detect_raw") and not hasattr(
        backend, "segment_candidates"
    )


class _WorkerBackends:
    """Per-thread backend instances; factories are called once per worker."""

    def __init__(self, detector, segmenter):
        self._det_src = detector
        self._seg_src = segmenter
        self._local = threading.local()
        self._owned = []
        self._lock = threading.Lock()

    def get(self):
        if not hasattr(self._local, "pair"):
            det = self._det_src() if _is_factory(self._det_src) else self._det_src
            seg = self._seg_src() if _is_factory(self._seg_src) else self._seg_src
            with self._lock:
                if _is_factory(self._det_src):
                    self._owned.append(det)
                if _is_factory(self._seg_src):
                    self._owned.append(seg)
            self._local.pair = (det, seg)
        return self._local.pair

    def close_all(self) -> None:
        with self._lock:
            for backend in self._owned:
                close = getattr(backend, "close", None)
                if close is not None:
                    try:
                        close()
                    except Exception:
                        logger.exception("error closing backend %s", backend)
            self._owned.clear()


def run_split(
    index: DatasetIndex,
    split: str,
    config: PipelineConfig,
    detector,
    segmenter,
    parallelism: int = 1,
) -> SplitRunResult:
    """Run the pipeline over every record of a split.

    ``detector`` / ``segmenter`` are backend instances (shared; must be
    thread-safe) or zero-argument factories (one instance per worker).
    Per-image errors are collected and the run continues; results and
    failures come back sorted by image id.
    """
    records = sorted(index.by_split(split), key=lambda r: r.image_id)
    workers = _WorkerBackends(detector, segmenter)
    results: list[PipelineResult] = []
    failures: list[ImageFailure] = []

    def one(record: ImageRecord):
        det, seg = workers.get()
        return run_image(record, config, det, seg)

    try:
        if parallelism <= 1:
            for record in records:
                try:
                    results.append(one(record))
                except PipelineImageError as exc:
                    failures.append(ImageFailure(exc.image_id, str(exc.cause)))
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                futures = {pool.submit(one, record): record for record in records}
                for future, record in futures.items():
                    try:
                        results.append(future.result())
                    except PipelineImageError as exc:
                        failures.append(ImageFailure(exc.image_id, str(exc.cause)))
    finally:
        workers.close_all()

    results.sort(key=lambda r: r.image_id)
    failures.sort(key=lambda f: f.image_id)
    if failures:
        logger.warning("%d of %d images failed", len(failures), len(records))
    return SplitRunResult(results=results, failures=failures)


def result_to_dict(result: PipelineResult, include_timings: bool = True) -> dict:
    out = {
        "image_id": result.image_id,
        "aggregation": result.aggregation,
        "detections": [
            {"box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2], "score": d.score, "label": d.label}
            for d in result.detections
        ],
        "instance_masks": [mask_to_payload(m) for m in result.instance_masks],
        "mask": mask_to_payload(result.aggregate_mask),
    }
    if include_timings:
        out["timings"] = {
            "detect_ms": result.timings.detect_ms,
            "segment_ms": result.timings.segment_ms,
            "total_ms": result.timings.total_ms,
            "overhead_ms": result.timings.overhead_ms,
        }
    return out


def serialize_results(run: SplitRunResult, include_timings: bool = True) -> str:
    """Canonical JSON-lines form, ordered by image id (byte-stable)."""
    lines = [
        json.dumps(result_to_dict(r, include_timings), sort_keys=True, separators=(",", ":"))
        for r in run.results
    ]
    for failure in run.failures:
        lines.append(
            json.dumps(
                {"image_id": failure.image_id, "failure": failure.error},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


def build_manifest(
    config: PipelineConfig,
    index: DatasetIndex,
    split: str,
    detector,
    segmenter,
    seed: int | None = None,
) -> dict:
    """Provenance record every report refers back to. Deliberately free of
    timestamps so reruns are byte-identical."""
    return {
        "tool": {"name": "boxprompt", "version": __version__},
        "config": config.to_dict(),
        "split": split,
        "seed": seed,
        "dataset": {"root": str(index.root), "hash": index.dataset_hash(), "records": len(index)},
        "backends": {
            "detector": backend_identity(detector),
            "segmenter": backend_identity(segmenter),
        },
    }


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def write_predictions(
    run: SplitRunResult, out_dir: str | Path, include_timings: bool = True
) -> list[Path]:
    """One ``<image_id>.pred.json`` per result, canonical formatting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for result in run.results:
        path = out_dir / f"{result.image_id}.pred.json"
        payload = json.dumps(
            result_to_dict(result, include_timings), sort_keys=True, separators=(",", ":")
        )
        path.write_text(payload + "\n", encoding="utf-8")
        written.append(path)
    return written
