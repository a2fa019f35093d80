"""Segmentation metrics, detector AP@50, and report emission.

Conventions (documented in every report footer):

- Empty denominators: pred and gt both empty scores 1.0 everywhere.
  Empty pred against non-empty gt has precision 0; empty gt against a
  non-empty pred has recall 0.
- Pixel-level F1 with foreground as the positive class is identically
  the Dice score; both are computed from the same integer counts, so
  the per-image identity f1 == dice is bit-exact.
- Average precision uses all-point interpolation (the precision
  envelope), single class.
- FPS is floor(1000 / mean total ms); the one-decimal figure is
  truncated, not rounded, consistent with the floor rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import DatasetIndex
from .geometry import BoxXYXY, Detection, box_iou
from .mask import (
    BinaryMask,
    ConfusionCounts,
    MaskDimensionError,
    confusion,
    instance_boxes,
    load_mask,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegMetrics:
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class StageTimingsLike:
    """Minimal stage-timing row for files and reports; the pipeline's own
    timing type satisfies the same attribute surface."""

    detect_ms: float = 0.0
    segment_ms: float = 0.0
    total_ms: float = 0.0


@dataclass(frozen=True)
class FpsSummary:
    mean_detect_ms: float
    mean_segment_ms: float
    mean_overhead_ms: float
    mean_total_ms: float
    fps: int
    fps_unrounded: float
    n: int


@dataclass(frozen=True)
class PerImageEval:
    image_id: int
    class_id: int
    metrics: SegMetrics
    counts: ConfusionCounts
    n_detections: int = 1


@dataclass
class AggregateReport:
    n_images: int
    macro: SegMetrics
    micro: SegMetrics
    no_detection_count: int
    multi_detection_count: int
    per_class: list[tuple[int, int, float]] = field(default_factory=list)
    per_class_above: int | None = None
    per_class_threshold: float | None = None
    per_class_omitted: int = 0
    map50: float | None = None
    fps: FpsSummary | None = None
    manifest_ref: str | None = None


def metrics_from_counts(counts: ConfusionCounts) -> SegMetrics:
    """Metrics from exact integer confusion counts.

    dice and f1 share the 2tp/(2tp+fp+fn) form: at pixel level with
    foreground positive they are the same quantity, and computing both
    from the counts keeps the identity bit-exact.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == 0 and fp == 0 and fn == 0:
        return SegMetrics(iou=1.0, dice=1.0, precision=1.0, recall=1.0, f1=1.0)
    iou = tp / (tp + fp + fn)
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return SegMetrics(iou=iou, dice=dice, precision=precision, recall=recall, f1=dice)


def seg_metrics(pred: BinaryMask, gt: BinaryMask) -> SegMetrics:
    """Score a predicted mask against ground truth (dims must match)."""
    if pred.dims != gt.dims:
        raise MaskDimensionError(
            f"prediction dims {pred.dims.width}x{pred.dims.height} do not match "
            f"ground truth dims {gt.dims.width}x{gt.dims.height}"
        )
    return metrics_from_counts(confusion(pred, gt))


def aggregate(evals: Sequence[PerImageEval]) -> AggregateReport:
    """Macro (mean over images) and micro (pooled counts) aggregates.

    The macro reduction runs in ascending image-id order so results are
    bit-stable regardless of input permutation or parallelism.
    """
    if not evals:
        raise ValueError("cannot aggregate zero per-image evaluations")
    ordered = sorted(evals, key=lambda e: e.image_id)
    n = len(ordered)
    sums = {"iou": 0.0, "dice": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    pooled = ConfusionCounts(0, 0, 0, 0)
    no_det = 0
    multi_det = 0
    for ev in ordered:
        m = ev.metrics
        sums["iou"] += m.iou
        sums["dice"] += m.dice
        sums["precision"] += m.precision
        sums["recall"] += m.recall
        sums["f1"] += m.f1
        pooled = pooled + ev.counts
        if ev.n_detections == 0:
            no_det += 1
        elif ev.n_detections > 1:
            multi_det += 1
    macro = SegMetrics(**{k: v / n for k, v in sums.items()})
    micro = metrics_from_counts(pooled)
    return AggregateReport(
        n_images=n,
        macro=macro,
        micro=micro,
        no_detection_count=no_det,
        multi_detection_count=multi_det,
    )


def ap50(
    detections_by_image: Mapping[int, Sequence[Detection]],
    gt_boxes_by_image: Mapping[int, Sequence[BoxXYXY]],
    iou_threshold: float = 0.5,
) -> float:
    """Single-class average precision at the given box-IoU threshold.

    All detections are pooled and sorted by score descending (ties by
    image id, then input order). A detection is a true positive iff its
    IoU with some still-unmatched GT box in its image reaches the
    threshold; it claims the highest-IoU such box (ties to the first).
    AP is the area under the all-point interpolated precision-recall
    curve, returned as a fraction in [0, 1].
    """
    n_gt = sum(len(v) for v in gt_boxes_by_image.values())
    if n_gt == 0:
        raise ValueError("AP needs at least one ground-truth box")

    pooled: list[tuple[float, int, int, Detection]] = []
    for image_id, dets in detections_by_image.items():
        for input_index, det in enumerate(dets):
            pooled.append((det.score, image_id, input_index, det))
    pooled.sort(key=lambda row: (-row[0], row[1], row[2]))

    matched: dict[int, set[int]] = {}
    tp_flags: list[bool] = []
    for score, image_id, _input_index, det in pooled:
        gts = gt_boxes_by_image.get(image_id, ())
        used = matched.setdefault(image_id, set())
        best_iou = 0.0
        best_idx: int | None = None
        for gt_idx, gt_box in enumerate(gts):
            if gt_idx in used:
                continue
            iou = box_iou(det.box, gt_box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_idx = gt_idx
        if best_idx is not None:
            used.add(best_idx)
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    if not tp_flags:
        return 0.0
    precisions: list[float] = []
    recalls: list[float] = []
    tp_cum = 0
    for rank, flag in enumerate(tp_flags, start=1):
        if flag:
            tp_cum += 1
        precisions.append(tp_cum / rank)
        recalls.append(tp_cum / n_gt)

    # precision envelope over the recall axis, then rectangle sum
    mrec = [0.0] + recalls
    mpre = [0.0] + precisions + [0.0]
    mrec.append(mrec[-1])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = 0.0
    for i in range(1, len(mrec)):
        if mrec[i] != mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return ap


def per_class_summary(
    evals: Sequence[PerImageEval],
    threshold: float = 0.85,
    all_class_ids: Iterable[int] | None = None,
) -> tuple[list[tuple[int, int, float]], int, int]:
    """Mean IoU grouped by class id.

    Returns (rows, above_count, omitted_count): rows are
    (class_id, n_images, mean_iou) in ascending class id;
    ``above_count`` counts classes with mean IoU strictly above the
    threshold; classes from ``all_class_ids`` with zero evaluated images
    are omitted from the table and only counted.
    """
    by_class: dict[int, list[float]] = {}
    for ev in sorted(evals, key=lambda e: e.image_id):
        by_class.setdefault(ev.class_id, []).append(ev.metrics.iou)
    rows = [
        (class_id, len(ious), sum(ious) / len(ious))
        for class_id, ious in sorted(by_class.items())
    ]
    above = sum(1 for _cid, _n, mean_iou in rows if mean_iou > threshold)
    omitted = 0
    if all_class_ids is not None:
        omitted = len(set(all_class_ids) - set(by_class))
    return rows, above, omitted


def fps_summary(timings: Sequence) -> FpsSummary:
    """Mean per-stage latency and the throughput it implies.

    ``fps`` is floor(1000 / mean total ms); ``fps_unrounded`` keeps one
    truncated decimal. The overhead bucket is whatever the total holds
    beyond the detect and segment stages, rather than assuming zero.
    """
    if not timings:
        raise ValueError("cannot summarize zero timings")
    n = len(timings)
    mean_detect = sum(t.detect_ms for t in timings) / n
    mean_segment = sum(t.segment_ms for t in timings) / n
    mean_total = sum(t.total_ms for t in timings) / n
    if mean_total <= 0.0:
        raise ValueError("mean total latency must be positive")
    return FpsSummary(
        mean_detect_ms=mean_detect,
        mean_segment_ms=mean_segment,
        mean_overhead_ms=mean_total - mean_detect - mean_segment,
        mean_total_ms=mean_total,
        fps=math.floor(1000.0 / mean_total),
        fps_unrounded=math.floor(10000.0 / mean_total) / 10.0,
        n=n,
    )


def evaluate_predictions(
    index: DatasetIndex,
    split: str,
    predictions: Mapping[int, object],
    per_class_threshold: float = 0.85,
    manifest_ref: str | None = None,
) -> tuple[AggregateReport, list[int]]:
    """Score predictions for a split against its ground truth.

    ``predictions`` maps image id to any object exposing
    ``aggregate_mask``, ``detections``, and ``timings`` (a PipelineResult
    works). Records without a prediction are scored as all-background
    with zero detections, so partial runs remain scoreable and misses
    are penalized; their ids are returned alongside the report.
    """
    records = sorted(index.by_split(split), key=lambda r: r.image_id)
    if not records:
        raise ValueError(f"split {split!r} has no records")
    evals: list[PerImageEval] = []
    dets_by_image: dict[int, Sequence[Detection]] = {}
    gts_by_image: dict[int, Sequence[BoxXYXY]] = {}
    timings = []
    missing: list[int] = []
    for rec in records:
        gt = load_mask(rec.mask_path(index.root))
        gts_by_image[rec.image_id] = instance_boxes(gt)
        pred = predictions.get(rec.image_id)
        if pred is None:
            missing.append(rec.image_id)
            counts = ConfusionCounts(
                tp=0, fp=0, fn=gt.foreground_area, tn=gt.dims.width * gt.dims.height - gt.foreground_area
            )
            dets_by_image[rec.image_id] = ()
            n_det = 0
        else:
            counts = confusion(pred.aggregate_mask, gt)
            dets_by_image[rec.image_id] = list(pred.detections)
            n_det = len(pred.detections)
            if pred.timings is not None and pred.timings.total_ms > 0.0:
                timings.append(pred.timings)
        evals.append(
            PerImageEval(
                image_id=rec.image_id,
                class_id=rec.class_id,
                metrics=metrics_from_counts(counts),
                counts=counts,
                n_detections=n_det,
            )
        )
    if missing:
        logger.warning(
            "%d of %d images had no prediction; scored as all-background", len(missing), len(records)
        )
    report = aggregate(evals)
    report.map50 = ap50(dets_by_image, gts_by_image)
    rows, above, omitted = per_class_summary(
        evals, threshold=per_class_threshold, all_class_ids={r.class_id for r in index.records}
    )
    report.per_class = rows
    report.per_class_above = above
    report.per_class_threshold = per_class_threshold
    report.per_class_omitted = omitted
    if timings and len(timings) == len(evals) - len(missing):
        report.fps = fps_summary(timings)
    report.manifest_ref = manifest_ref
    return report, missing


REPORT_COLUMNS = ("method", "n_images", "iou", "dice", "f1", "precision", "recall", "map50", "fps")

_FOOTER_LINES = (
    "# conventions: empty pred+gt score 1.0; empty pred has precision 0; empty gt has recall 0",
    "# pixel-level F1 (foreground positive) is identically Dice; both derive from the same counts,",
    "#   so a sub-0.001 gap between them cannot arise from these definitions",
    "# mAP50: all-point interpolated average precision, single class, shown as a percentage",
    "# fps: floor(1000 / mean total ms); one-decimal figure truncated",
)


def _fmt(value: float | None, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def format_report_table(rows: list[dict], manifest_ref: str | None = None) -> str:
    """Tab-delimited method-comparison table with a convention footer.

    Each row dict carries the REPORT_COLUMNS keys; ``map50`` is a
    fraction here and displayed as a percentage.
    """
    lines = ["\t".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    str(row["method"]),
                    str(row["n_images"]),
                    _fmt(row.get("iou")),
                    _fmt(row.get("dice")),
                    _fmt(row.get("f1")),
                    _fmt(row.get("precision")),
                    _fmt(row.get("recall")),
                    "-" if row.get("map50") is None else f"{100.0 * row['map50']:.1f}",
                    "-" if row.get("fps") is None else str(row["fps"]),
                ]
            )
        )
    lines.extend(_FOOTER_LINES)
    if manifest_ref:
        lines.append(f"# manifest: {manifest_ref}")
    return "\n".join(lines) + "\n"


def format_per_class_table(
    rows: list[tuple[int, int, float]],
    above: int,
    threshold: float,
    omitted: int,
    manifest_ref: str | None = None,
) -> str:
    lines = ["class_id\tn_images\tmean_iou"]
    for class_id, n_images, mean_iou in rows:
        lines.append(f"{class_id}\t{n_images}\t{mean_iou:.4f}")
    lines.append(f"# classes with mean IoU > {threshold}: {above} of {len(rows)}")
    if omitted:
        lines.append(f"# {omitted} class(es) with zero evaluated images omitted")
    if manifest_ref:
        lines.append(f"# manifest: {manifest_ref}")
    return "\n".join(lines) + "\n"


def format_summary_text(report: AggregateReport, method: str = "run") -> str:
    """Plain-text aggregate summary."""
    parts = [
        f"method: {method}",
        f"images evaluated: {report.n_images}",
        (
            f"macro: iou={report.macro.iou:.4f} dice={report.macro.dice:.4f} "
            f"f1={report.macro.f1:.4f} precision={report.macro.precision:.4f} "
            f"recall={report.macro.recall:.4f}"
        ),
        (
            f"micro: iou={report.micro.iou:.4f} dice={report.micro.dice:.4f} "
            f"f1={report.micro.f1:.4f} precision={report.micro.precision:.4f} "
            f"recall={report.micro.recall:.4f}"
        ),
        f"images with no detection: {report.no_detection_count}",
        f"images with multiple detections: {report.multi_detection_count}",
    ]
    if report.map50 is not None:
        parts.append(f"mAP50: {100.0 * report.map50:.1f}")
    if report.fps is not None:
        fps = report.fps
        parts.append(
            f"latency: detect={fps.mean_detect_ms:.1f}ms segment={fps.mean_segment_ms:.1f}ms "
            f"overhead={fps.mean_overhead_ms:.1f}ms total={fps.mean_total_ms:.1f}ms "
            f"-> {fps.fps} fps ({fps.fps_unrounded:.1f})"
        )
    if report.per_class_above is not None and report.per_class_threshold is not None:
        parts.append(
            f"classes with mean IoU > {report.per_class_threshold}: {report.per_class_above} "
            f"of {len(report.per_class)}"
        )
    if report.manifest_ref:
        parts.append(f"manifest: {report.manifest_ref}")
    return "\n".join(parts) + "\n"


def report_to_dict(report: AggregateReport, method: str = "run") -> dict:
    """Machine-readable counterpart of the text summary."""
    out = {
        "method": method,
        "n_images": report.n_images,
        "macro": {
            "iou": report.macro.iou,
            "dice": report.macro.dice,
            "f1": report.macro.f1,
            "precision": report.macro.precision,
            "recall": report.macro.recall,
        },
        "micro": {
            "iou": report.micro.iou,
            "dice": report.micro.dice,
            "f1": report.micro.f1,
            "precision": report.micro.precision,
            "recall": report.micro.recall,
        },
        "no_detection_count": report.no_detection_count,
        "multi_detection_count": report.multi_detection_count,
        "map50": report.map50,
        "per_class": [
            {"class_id": cid, "n_images": n, "mean_iou": miou} for cid, n, miou in report.per_class
        ],
        "per_class_above": report.per_class_above,
        "per_class_threshold": report.per_class_threshold,
        "per_class_omitted": report.per_class_omitted,
        "manifest": report.manifest_ref,
    }
    if report.fps is not None:
        out["fps"] = {
            "mean_detect_ms": report.fps.mean_detect_ms,
            "mean_segment_ms": report.fps.mean_segment_ms,
            "mean_overhead_ms": report.fps.mean_overhead_ms,
            "mean_total_ms": report.fps.mean_total_ms,
            "fps": report.fps.fps,
            "fps_unrounded": report.fps.fps_unrounded,
            "n": report.fps.n,
        }
    return out


def write_reports(
    report: AggregateReport,
    out_dir: str | Path,
    method: str = "run",
) -> dict[str, Path]:
    """Emit the table, per-class table, and summaries into ``out_dir``."""
    import json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row = {
        "method": method,
        "n_images": report.n_images,
        "iou": report.macro.iou,
        "dice": report.macro.dice,
        "f1": report.macro.f1,
        "precision": report.macro.precision,
        "recall": report.macro.recall,
        "map50": report.map50,
        "fps": report.fps.fps if report.fps else None,
    }
    paths = {
        "report": out_dir / "report.tsv",
        "per_class": out_dir / "per_class.tsv",
        "summary": out_dir / "summary.txt",
        "summary_json": out_dir / "summary.json",
    }
    paths["report"].write_text(
        format_report_table([row], manifest_ref=report.manifest_ref), encoding="utf-8"
    )
    paths["per_class"].write_text(
        format_per_class_table(
            report.per_class,
            report.per_class_above or 0,
            report.per_class_threshold if report.per_class_threshold is not None else 0.85,
            report.per_class_omitted,
            manifest_ref=report.manifest_ref,
        ),
        encoding="utf-8",
    )
    paths["summary"].write_text(format_summary_text(report, method), encoding="utf-8")
    paths["summary_json"].write_text(
        json.dumps(report_to_dict(report, method), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return paths
