"""Dataset ingestion, split assignment, YOLO export, and synthetic data.

The on-disk layout mirrors the common fine-grained bird benchmark
distribution: ``images.txt`` (``<id> <relpath>``), ``bounding_boxes.txt``
(``<id> <x> <y> <w> <h>`` with a top-left corner), ``image_class_labels.txt``
(``<id> <class_id>``), an ``images/`` tree, and a ``segmentations/`` tree
mirroring the image paths with ``.png`` masks.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import BoxXYXY, ImageDims, clip_box, to_normalized
from .mask import load_mask, tight_box

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset roots."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    rel_path: str
    class_id: int
    gt_box: BoxXYXY
    gt_mask_ref: str
    dims: ImageDims
    split: str | None = None

    def image_path(self, root: str | Path) -> Path:
        return Path(root) / "images" / self.rel_path

    def mask_path(self, root: str | Path) -> Path:
        return Path(root) / self.gt_mask_ref


@dataclass(frozen=True)
class SplitSpec:
    """Split fractions plus the permutation seed. Fractions must all be
    positive and sum to 1 within 1e-9."""

    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f <= 0.0 for f in fractions):
            raise ValueError(f"all split fractions must be positive, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1.0, got {sum(fractions)}")


@dataclass
class DatasetIndex:
    """Immutable-after-construction view of a dataset root."""

    root: Path
    records: list[ImageRecord]
    skipped: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, image_id: int) -> ImageRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def by_split(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def dataset_hash(self) -> str:
        """Content hash over the indexed records, for run provenance."""
        h = hashlib.sha256()
        for rec in sorted(self.records, key=lambda r: r.image_id):
            b = rec.gt_box
            line = (
                f"{rec.image_id}\t{rec.rel_path}\t{rec.class_id}\t"
                f"{b.x1:.6f},{b.y1:.6f},{b.x2:.6f},{b.y2:.6f}\t"
                f"{rec.dims.width}x{rec.dims.height}\t{rec.split or '-'}\n"
            )
            h.update(line.encode("utf-8"))
        return h.hexdigest()


def _parse_id_file(path: Path, n_fields: int) -> dict[int, list[str]]:
    """Parse ``<id> <field>...`` lines, rejecting malformed or duplicate ids."""
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    out: dict[int, list[str]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 1 + n_fields:
                raise DatasetError(f"{path}:{lineno}: expected {1 + n_fields} fields, got {len(parts)}")
            try:
                image_id = int(parts[0])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: bad image id {parts[0]!r}") from exc
            if image_id in out:
                raise DatasetError(f"{path}:{lineno}: duplicate image id {image_id}")
            out[image_id] = parts[1:]
    return out


def load_index(root: str | Path, mask_dir: str = "segmentations") -> DatasetIndex:
    """Build a DatasetIndex from a dataset root.

    Boxes are converted from top-left ``(x, y, w, h)`` to corner form and
    clipped to the image bounds (clipping is logged, not fatal). Records
    with a missing mask, missing box entry, or unreadable image are
    flagged and excluded; the exclusion counts are returned on the index.
    """
    root = Path(root)
    images = _parse_id_file(root / "images.txt", 1)
    boxes = _parse_id_file(root / "bounding_boxes.txt", 4)
    labels = _parse_id_file(root / "image_class_labels.txt", 1)

    records: list[ImageRecord] = []
    skipped: dict[str, int] = {}

    def skip(reason: str, image_id: int) -> None:
        skipped[reason] = skipped.get(reason, 0) + 1
        logger.debug("excluding image %d: %s", image_id, reason)

    for image_id in sorted(images):
        (rel_path,) = images[image_id]
        if image_id not in boxes:
            skip("missing box", image_id)
            continue
        if image_id not in labels:
            skip("missing class label", image_id)
            continue
        try:
            x, y, w, h = (float(v) for v in boxes[image_id])
        except ValueError as exc:
            raise DatasetError(f"{root / 'bounding_boxes.txt'}: bad box for id {image_id}: {exc}") from exc
        try:
            class_id = int(labels[image_id][0])
        except ValueError as exc:
            raise DatasetError(
                f"{root / 'image_class_labels.txt'}: bad class for id {image_id}: {exc}"
            ) from exc

        image_path = root / "images" / rel_path
        try:
            with Image.open(image_path) as img:
                dims = ImageDims(width=img.width, height=img.height)
        except (OSError, ValueError):
            skip("unreadable image", image_id)
            continue

        mask_rel = Path(mask_dir) / Path(rel_path).with_suffix(".png")
        if not (root / mask_rel).is_file():
            skip("missing mask", image_id)
            continue

        raw_box = BoxXYXY(x, y, x + w, y + h)
        gt_box = clip_box(raw_box, dims)
        if gt_box != raw_box:
            logger.info("image %d: box %s clipped to image bounds %dx%d",
                        image_id, raw_box, dims.width, dims.height)

        records.append(
            ImageRecord(
                image_id=image_id,
                rel_path=rel_path,
                class_id=class_id,
                gt_box=gt_box,
                gt_mask_ref=str(mask_rel),
                dims=dims,
            )
        )

    if skipped:
        logger.warning("excluded %d records: %s", sum(skipped.values()), skipped)
    return DatasetIndex(root=root, records=records, skipped=skipped)


def _shuffle_key(seed: int, image_id: int) -> bytes:
    return hashlib.sha256(f"{seed}:{image_id}".encode("ascii")).digest()


def assign_splits(index: DatasetIndex, spec: SplitSpec) -> DatasetIndex:
    """Assign every record to exactly one split, deterministically.

    The permutation orders image ids by SHA-256 of ``"<seed>:<id>"``
    (ties by id), which is stable across platforms, library versions,
    and input record order. The first floor(train_fraction * N) ids go
    to train, the next floor(val_fraction * N) to val, and the
    remainder to test.
    """
    ids = [r.image_id for r in index.records]
    order = sorted(ids, key=lambda i: (_shuffle_key(spec.seed, i), i))
    n = len(order)
    n_train = math.floor(spec.train_fraction * n)
    n_val = math.floor(spec.val_fraction * n)
    split_of: dict[int, str] = {}
    for pos, image_id in enumerate(order):
        if pos < n_train:
            split_of[image_id] = "train"
        elif pos < n_train + n_val:
            split_of[image_id] = "val"
        else:
            split_of[image_id] = "test"
    records = [replace(r, split=split_of[r.image_id]) for r in index.records]
    return DatasetIndex(root=index.root, records=records, skipped=dict(index.skipped))


def write_split_file(index: DatasetIndex, path: str | Path) -> None:
    """Write ``image_id split_name`` lines in ascending id order."""
    lines = [f"{r.image_id} {r.split}" for r in sorted(index.records, key=lambda r: r.image_id)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_file(index: DatasetIndex, path: str | Path) -> DatasetIndex:
    """Apply split assignments from a split file to an index."""
    split_of: dict[int, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLIT_NAMES:
            raise DatasetError(f"{path}:{lineno}: expected '<id> <train|val|test>', got {line!r}")
        split_of[int(parts[0])] = parts[1]
    records = [replace(r, split=split_of.get(r.image_id)) for r in index.records]
    return DatasetIndex(root=index.root, records=records, skipped=dict(index.skipped))


def export_yolo(index: DatasetIndex, split: str, out_path: str | Path) -> int:
    """Export one single-class label file per image of ``split``.

    Each label file holds one line ``0 cx cy w h`` with 6-decimal fixed
    formatting; a ``manifest.txt`` lists the image paths, one per line.
    Returns the number of label files written. Images keep their native
    dims; any resizing is the downstream trainer's concern.
    """
    if split not in SPLIT_NAMES:
        raise ValueError(f"unknown split {split!r}")
    records = index.by_split(split)
    if not records and not any(r.split for r in index.records):
        raise DatasetError("index has no split assignment; run assign_splits first")
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    manifest_lines: list[str] = []
    count = 0
    for rec in sorted(records, key=lambda r: r.image_id):
        norm = to_normalized(rec.gt_box, rec.dims, image_id=rec.image_id)
        label_rel = Path(rec.rel_path).with_suffix(".txt")
        label_file = out_path / label_rel
        label_file.parent.mkdir(parents=True, exist_ok=True)
        label_file.write_text(
            f"0 {norm.cx:.6f} {norm.cy:.6f} {norm.w:.6f} {norm.h:.6f}\n", encoding="utf-8"
        )
        manifest_lines.append(str(rec.image_path(index.root)))
        count += 1
    (out_path / "manifest.txt").write_text(
        "\n".join(manifest_lines) + ("\n" if manifest_lines else ""), encoding="utf-8"
    )
    return count


def _render_texture(rng: np.random.Generator, dims: ImageDims) -> np.ndarray:
    """Low-frequency noise background so images are not flat color."""
    coarse = rng.integers(40, 180, size=(dims.height // 8 + 1, dims.width // 8 + 1, 3), dtype=np.uint8)
    texture = np.kron(coarse, np.ones((8, 8, 1), dtype=np.uint8))[: dims.height, : dims.width]
    speckle = rng.integers(0, 24, size=(dims.height, dims.width, 1), dtype=np.uint8)
    return np.clip(texture.astype(np.int16) + speckle, 0, 255).astype(np.uint8)


def _ellipse_bitmap(dims: ImageDims, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    """Rasterize a filled ellipse over pixel centers."""
    ys = np.arange(dims.height)[:, None] + 0.5
    xs = np.arange(dims.width)[None, :] + 0.5
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def mask_box_violations(index: DatasetIndex, tolerance_px: float = 1.0) -> list[int]:
    """Ids of records whose GT-mask foreground leaves the GT box by more
    than the tolerance. A statistic for validation reports, not an
    assertion: real annotation sets contain such records."""
    violating: list[int] = []
    for rec in index.records:
        path = rec.mask_path(index.root)
        try:
            bitmap = load_mask(path).to_array()
        except (OSError, ValueError):
            violating.append(rec.image_id)
            continue
        if not bitmap.any():
            continue
        fg = tight_box(bitmap)
        b = rec.gt_box
        if (
            fg.x1 < b.x1 - tolerance_px
            or fg.y1 < b.y1 - tolerance_px
            or fg.x2 > b.x2 + tolerance_px
            or fg.y2 > b.y2 + tolerance_px
        ):
            violating.append(rec.image_id)
    return violating


def generate_synthetic(
    count: int,
    dims: ImageDims,
    seed: int,
    out_root: str | Path,
    n_classes: int = 3,
    max_instances: int = 3,
) -> Path:
    """Write a desk-scale synthetic dataset root, deterministic under seed.

    Each image holds 1..max_instances filled ellipses on a textured
    background. Ellipses are rejection-sampled so their 2-px-expanded
    bounding boxes stay disjoint, which makes every instance a separate
    mask component whose ground-truth box is exactly the component's
    tight bounding box.
    """
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    (out_root / "images" / "synthetic").mkdir(parents=True, exist_ok=True)
    (out_root / "segmentations" / "synthetic").mkdir(parents=True, exist_ok=True)

    min_ax = max(6.0, min(dims.width, dims.height) / 10.0)
    max_ax = max(min_ax + 1.0, min(dims.width, dims.height) / 5.0)

    images_lines: list[str] = []
    boxes_lines: list[str] = []
    labels_lines: list[str] = []

    for i in range(count):
        image_id = i + 1
        n_inst = int(rng.integers(1, max_instances + 1))
        placed: list[tuple[float, float, float, float]] = []
        full = np.zeros((dims.height, dims.width), dtype=bool)
        for _ in range(n_inst):
            for _attempt in range(60):
                ax = float(rng.uniform(min_ax, max_ax))
                ay = float(rng.uniform(min_ax, max_ax))
                cx = float(rng.uniform(ax + 2.0, dims.width - ax - 2.0))
                cy = float(rng.uniform(ay + 2.0, dims.height - ay - 2.0))
                # 2-px expanded bbox separation keeps components disjoint
                clear = all(
                    abs(cx - pcx) > ax + pax + 4.0 or abs(cy - pcy) > ay + pay + 4.0
                    for pcx, pcy, pax, pay in placed
                )
                if clear:
                    placed.append((cx, cy, ax, ay))
                    break

        image = _render_texture(rng, dims)
        for cx, cy, ax, ay in placed:
            bitmap = _ellipse_bitmap(dims, cx, cy, ax, ay)
            full |= bitmap
            color = rng.integers(190, 255, size=3, dtype=np.uint8)
            image[bitmap] = color

        rel = f"synthetic/img_{image_id:05d}.png"
        Image.fromarray(image, mode="RGB").save(out_root / "images" / rel)
        mask_img = np.where(full, 255, 0).astype(np.uint8)
        Image.fromarray(mask_img, mode="L").save(out_root / "segmentations" / rel)

        overall = tight_box(full)
        images_lines.append(f"{image_id} {rel}")
        boxes_lines.append(
            f"{image_id} {overall.x1:.1f} {overall.y1:.1f} {overall.width:.1f} {overall.height:.1f}"
        )
        labels_lines.append(f"{image_id} {(i % n_classes) + 1}")

    (out_root / "images.txt").write_text("\n".join(images_lines) + "\n", encoding="utf-8")
    (out_root / "bounding_boxes.txt").write_text("\n".join(boxes_lines) + "\n", encoding="utf-8")
    (out_root / "image_class_labels.txt").write_text("\n".join(labels_lines) + "\n", encoding="utf-8")
    return out_root
