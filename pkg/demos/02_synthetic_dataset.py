"""Generate a desk-scale dataset, ingest it, split it, and export labels.

The synthetic generator writes the same on-disk layout the real-corpus
loader expects, with pixel-exact ground truth, so every downstream
stage can be exercised without any real data.
"""

import tempfile
from pathlib import Path

from boxprompt import ImageDims, SplitSpec, assign_splits, generate_synthetic, load_index
from boxprompt.dataset import export_yolo

workdir = Path(tempfile.mkdtemp(prefix="boxprompt-demo-"))
root = generate_synthetic(count=20, dims=ImageDims(128, 128), seed=7, out_root=workdir / "data")
print(f"dataset root: {root}")

index = load_index(root)
print(f"loaded {len(index)} records, excluded: {index.skipped or 'none'}")

rec = index.records[0]
print(f"first record: id={rec.image_id} class={rec.class_id} box={rec.gt_box} dims={rec.dims}")

# Deterministic 70/15/15 split: same seed, same assignment, forever.
index = assign_splits(index, SplitSpec(seed=42))
for name in ("train", "val", "test"):
    print(f"  {name}: {len(index.by_split(name))} images")

labels = workdir / "labels"
count = export_yolo(index, "train", labels)
print(f"\nexported {count} single-class label files to {labels}")
example = next(p for p in sorted(labels.rglob("*.txt")) if p.name != "manifest.txt")
print(f"example label ({example.name}): {example.read_text().strip()}")
