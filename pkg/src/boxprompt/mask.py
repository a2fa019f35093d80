"""Binary masks with a canonical run-length encoding.

The codec is part of the wire protocol, so it is fixed bit-exactly:
row-major scan, uncompressed decimal counts alternating background /
foreground and starting with a background run. A leading 0 marks a mask
whose first pixel is foreground; no other zero count is permitted.

Mask fixture files carry ``"width height"`` on the first line and the
space-separated counts on the second. Ground-truth masks may also be
read from single-channel images, binarized at >= 128 of 255.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import BoxXYXY, ImageDims


class MaskDimensionError(ValueError):
    """Raised when masks with different dims are combined or compared."""


@dataclass(frozen=True)
class BinaryMask:
    """Foreground bitmap stored as canonical run-length counts."""

    dims: ImageDims
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        _validate_counts(self.counts, self.dims)

    @classmethod
    def from_array(cls, bitmap: np.ndarray) -> "BinaryMask":
        return rle_encode(bitmap)

    def to_array(self) -> np.ndarray:
        """Decode to an H x W boolean bitmap."""
        values = np.zeros(len(self.counts), dtype=bool)
        values[1::2] = True
        flat = np.repeat(values, self.counts)
        return flat.reshape(self.dims.height, self.dims.width)

    @property
    def foreground_area(self) -> int:
        return int(sum(self.counts[1::2]))

    def complement(self) -> "BinaryMask":
        return rle_encode(~self.to_array())


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level confusion counts between a predicted and a true mask."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def _validate_counts(counts: tuple[int, ...], dims: ImageDims) -> None:
    if len(counts) == 0:
        raise ValueError("RLE counts must be non-empty")
    arr = np.asarray(counts)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"RLE counts must be integers, got {arr.dtype}")
    if (arr < 0).any():
        raise ValueError("RLE counts must be non-negative")
    if (arr[1:] == 0).any():
        raise ValueError("only a leading zero count is permitted")
    total = int(arr.sum())
    expected = dims.width * dims.height
    if total != expected:
        raise ValueError(f"RLE counts sum to {total}, expected {expected} for {dims.width}x{dims.height}")


def rle_encode(bitmap: np.ndarray) -> BinaryMask:
    """Encode an H x W boolean grid into canonical run-length counts."""
    grid = np.asarray(bitmap, dtype=bool)
    if grid.ndim != 2 or grid.size == 0:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    height, width = grid.shape
    flat = grid.ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds)
    if flat[0]:
        counts = np.concatenate(([0], counts))
    return BinaryMask(ImageDims(width=width, height=height), tuple(int(c) for c in counts))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    """Decode a mask back to its H x W boolean bitmap."""
    return mask.to_array()


def union(masks: list[BinaryMask], dims: ImageDims | None = None) -> BinaryMask:
    """Pixel-wise OR of masks sharing the same dims.

    An empty list yields an all-background mask of the requested ``dims``.
    """
    if not masks:
        if dims is None:
            raise ValueError("union of zero masks requires explicit dims")
        return all_background(dims)
    first = masks[0].dims
    for m in masks[1:]:
        if m.dims != first:
            raise MaskDimensionError(
                f"cannot union masks of dims {first.width}x{first.height} "
                f"and {m.dims.width}x{m.dims.height}"
            )
    if dims is not None and first != dims:
        raise MaskDimensionError(
            f"masks have dims {first.width}x{first.height}, requested {dims.width}x{dims.height}"
        )
    combined = np.zeros((first.height, first.width), dtype=bool)
    for m in masks:
        combined |= m.to_array()
    return rle_encode(combined)


def all_background(dims: ImageDims) -> BinaryMask:
    return BinaryMask(dims, (dims.width * dims.height,))


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Exact integer pixel confusion counts of ``pred`` against ``gt``."""
    if pred.dims != gt.dims:
        raise MaskDimensionError(
            f"prediction dims {pred.dims.width}x{pred.dims.height} do not match "
            f"ground truth dims {gt.dims.width}x{gt.dims.height}"
        )
    p = pred.to_array()
    g = gt.to_array()
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def tight_box(bitmap: np.ndarray) -> BoxXYXY:
    """Tight pixel-boundary bounding box of a bitmap's foreground.

    Pixel (row, col) occupies the unit square [col, col+1) x [row, row+1),
    so the box of a single pixel at (0, 0) is (0, 0, 1, 1).
    """
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    if rows.size == 0:
        raise ValueError("bitmap has no foreground")
    return BoxXYXY(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def instance_boxes(mask: BinaryMask, min_area: int = 1) -> list[BoxXYXY]:
    """Tight boxes of the mask's 8-connected foreground components.

    Components smaller than ``min_area`` pixels are skipped. Boxes come
    out in deterministic scan order.
    """
    bitmap = mask.to_array()
    labeled, _ = ndimage.label(bitmap, structure=np.ones((3, 3), dtype=int))
    boxes: list[BoxXYXY] = []
    for idx, slot in enumerate(ndimage.find_objects(labeled), start=1):
        if slot is None:
            continue
        if int((labeled[slot] == idx).sum()) < min_area:
            continue
        rows, cols = slot
        boxes.append(
            BoxXYXY(float(cols.start), float(rows.start), float(cols.stop), float(rows.stop))
        )
    return boxes


def rasterize_box(box: BoxXYXY, dims: ImageDims) -> np.ndarray:
    """Bitmap of the pixels whose centers fall inside ``box``.

    Integer-coordinate boxes cover exactly width x height pixels.
    """
    grid = np.zeros((dims.height, dims.width), dtype=bool)
    c0 = max(0, math.ceil(box.x1 - 0.5))
    c1 = min(dims.width - 1, math.floor(box.x2 - 0.5))
    r0 = max(0, math.ceil(box.y1 - 0.5))
    r1 = min(dims.height - 1, math.floor(box.y2 - 0.5))
    if c0 <= c1 and r0 <= r1:
        grid[r0 : r1 + 1, c0 : c1 + 1] = True
    return grid


def write_mask_file(mask: BinaryMask, path: str | Path) -> None:
    """Write the two-line mask fixture format."""
    path = Path(path)
    counts = " ".join(str(c) for c in mask.counts)
    path.write_text(f"{mask.dims.width} {mask.dims.height}\n{counts}\n", encoding="utf-8")


def read_mask_file(path: str | Path) -> BinaryMask:
    """Read the two-line mask fixture format."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ValueError(f"{path}: expected two lines (dims, counts)")
    try:
        width, height = (int(v) for v in lines[0].split())
        counts = tuple(int(v) for v in lines[1].split())
    except ValueError as exc:
        raise ValueError(f"{path}: malformed mask fixture: {exc}") from exc
    return BinaryMask(ImageDims(width=width, height=height), counts)


def load_mask_image(path: str | Path, threshold: int = 128) -> BinaryMask:
    """Load a grayscale mask image, binarizing at ``threshold`` of 255.

    Anti-aliased boundary values in real annotation masks make a fixed
    threshold necessary for deterministic scores.
    """
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"))
    return rle_encode(gray >= threshold)


def mask_to_payload(mask: BinaryMask) -> dict:
    """Wire/JSON payload form: ``{"dims": [w, h], "rle": [counts...]}``."""
    return {"dims": [mask.dims.width, mask.dims.height], "rle": list(mask.counts)}


def mask_from_payload(payload: dict) -> BinaryMask:
    width, height = (int(v) for v in payload["dims"])
    return BinaryMask(ImageDims(width=width, height=height), tuple(int(c) for c in payload["rle"]))


def load_mask(path: str | Path) -> BinaryMask:
    """Load a mask from either an image file or the text fixture format."""
    path = Path(path)
    if path.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}:
        return load_mask_image(path)
    return read_mask_file(path)
