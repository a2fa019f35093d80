"""Axis-aligned box types, format conversions, overlap, and NMS.

Two interchange formats are supported:

- ``BoxXYXY``: absolute corner coordinates in pixels (sub-pixel allowed).
- ``BoxCXCYWH``: center/size normalized to [0, 1] by the image dimensions.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class DegenerateBoxError(ValueError):
    """Raised when a zero-width or zero-height box cannot be processed."""


@dataclass(frozen=True)
class ImageDims:
    """Image size in integer pixels."""

    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class BoxXYXY:
    """Box as absolute corner coordinates, x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class BoxCXCYWH:
    """Box as normalized center and size; must lie inside the unit square."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        eps = 1e-9
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"normalized center outside [0,1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"normalized size outside (0,1]: ({self.w}, {self.h})")
        if (
            self.cx - self.w / 2 < -eps
            or self.cx + self.w / 2 > 1.0 + eps
            or self.cy - self.h / 2 < -eps
            or self.cy + self.h / 2 > 1.0 + eps
        ):
            raise ValueError(f"normalized box leaves the unit square: {self}")


@dataclass(frozen=True)
class Detection:
    """A detector output: box plus confidence score and text label."""

    box: BoxXYXY
    score: float
    label: str = "bird"

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0,1]: {self.score}")


def clip_box(box: BoxXYXY, dims: ImageDims) -> BoxXYXY:
    """Clip a box to [0, width] x [0, height]."""
    return BoxXYXY(
        min(max(box.x1, 0.0), float(dims.width)),
        min(max(box.y1, 0.0), float(dims.height)),
        min(max(box.x2, 0.0), float(dims.width)),
        min(max(box.y2, 0.0), float(dims.height)),
    )


def to_normalized(box: BoxXYXY, dims: ImageDims, image_id: object | None = None) -> BoxCXCYWH:
    """Convert an absolute box to normalized center/size form.

    The box is clipped to the image bounds first. A box that is degenerate
    after clipping (zero width or height) is rejected; the diagnostic names
    ``image_id`` when given.
    """
    clipped = clip_box(box, dims)
    if clipped.width <= 0.0 or clipped.height <= 0.0:
        where = f" for image {image_id!r}" if image_id is not None else ""
        raise DegenerateBoxError(f"degenerate box {box}{where} (zero width or height after clipping)")
    return BoxCXCYWH(
        cx=(clipped.x1 + clipped.x2) / (2.0 * dims.width),
        cy=(clipped.y1 + clipped.y2) / (2.0 * dims.height),
        w=clipped.width / dims.width,
        h=clipped.height / dims.height,
    )


def to_absolute(box: BoxCXCYWH, dims: ImageDims) -> BoxXYXY:
    """Convert a normalized center/size box back to absolute corners."""
    return BoxXYXY(
        (box.cx - box.w / 2.0) * dims.width,
        (box.cy - box.h / 2.0) * dims.height,
        (box.cx + box.w / 2.0) * dims.width,
        (box.cy + box.h / 2.0) * dims.height,
    )


def box_iou(a: BoxXYXY, b: BoxXYXY) -> float:
    """Intersection over union of two boxes using continuous areas.

    Returns 0.0 for disjoint boxes and whenever the union has zero area
    (degenerate boxes never overlap anything).
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Detections are visited in descending score order (ties keep input
    order); one is kept iff its IoU with every already-kept detection is
    <= ``iou_threshold``. The output preserves the kept (score) order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        cand = dets[i]
        if all(box_iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept
