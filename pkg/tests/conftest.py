from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from boxprompt.dataset import DatasetIndex, ImageRecord
from boxprompt.geometry import BoxXYXY, ImageDims


def write_image(path, width=20, height=16, value=90):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.full((height, width, 3), value, dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask_png(path, width=20, height=16, boxes=((4, 3, 9, 8),)):
    """Write a mask with filled rectangles given as (x1, y1, x2, y2)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.zeros((height, width), dtype=np.uint8)
    for x1, y1, x2, y2 in boxes:
        grid[y1:y2, x1:x2] = 255
    Image.fromarray(grid, mode="L").save(path)


@pytest.fixture
def tiny_root(tmp_path):
    """Three-image dataset root in the ingestion text layout."""
    root = tmp_path / "data"
    entries = [
        (1, "a/one.png", 1, (4.0, 3.0, 5.0, 5.0)),
        (2, "a/two.png", 1, (2.0, 2.0, 10.0, 8.0)),
        (3, "b/three.png", 2, (0.0, 0.0, 20.0, 16.0)),
    ]
    images_lines = []
    boxes_lines = []
    labels_lines = []
    for image_id, rel, class_id, (x, y, w, h) in entries:
        write_image(root / "images" / rel)
        write_mask_png(
            root / "segmentations" / rel,
            boxes=((int(x), int(y), int(x + w), int(y + h)),),
        )
        images_lines.append(f"{image_id} {rel}")
        boxes_lines.append(f"{image_id} {x} {y} {w} {h}")
        labels_lines.append(f"{image_id} {class_id}")
    (root / "images.txt").write_text("\n".join(images_lines) + "\n")
    (root / "bounding_boxes.txt").write_text("\n".join(boxes_lines) + "\n")
    (root / "image_class_labels.txt").write_text("\n".join(labels_lines) + "\n")
    return root


def make_memory_index(n: int, root: str | Path = "mem") -> DatasetIndex:
    """Index of n records with no backing files (split arithmetic tests)."""
    root = Path(root)
    dims = ImageDims(32, 32)
    records = [
        ImageRecord(
            image_id=i + 1,
            rel_path=f"c/{i + 1}.png",
            class_id=(i % 5) + 1,
            gt_box=BoxXYXY(1, 1, 9, 9),
            gt_mask_ref=f"segmentations/c/{i + 1}.png",
            dims=dims,
        )
        for i in range(n)
    ]
    return DatasetIndex(root=root, records=records)
