"""Harness and evaluation toolkit for box-prompted binary segmentation.

A detection stage proposes boxes, a promptable segmentation stage turns
each box into a mask, and the harness aggregates, scores, and reports.
Backends are pluggable: built-in oracles and perturbations for desk-scale
experiments, plus a line-delimited JSON protocol for real model adapters.
"""

__version__ = "0.1.0"

from .geometry import (
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
from .mask import (
    BinaryMask,
    ConfusionCounts,
    MaskDimensionError,
    confusion,
    instance_boxes,
    load_mask,
    rasterize_box,
    rle_decode,
    rle_encode,
    tight_box,
    union,
)
from .dataset import (
    DatasetError,
    DatasetIndex,
    ImageRecord,
    SplitSpec,
    assign_splits,
    export_yolo,
    generate_synthetic,
    load_index,
)
from .backends import (
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
)
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    SplitRunResult,
    StageTimings,
    run_image,
    run_split,
)
from .evaluation import (
    AggregateReport,
    PerImageEval,
    SegMetrics,
    aggregate,
    ap50,
    fps_summary,
    per_class_summary,
    seg_metrics,
)

__all__ = [name for name in dir() if not name.startswith("_")]
