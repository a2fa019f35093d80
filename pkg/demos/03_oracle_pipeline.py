"""Run the two-stage pipeline with oracle backends and score it.

Oracle detector plus oracle segmenter reproduces ground truth exactly,
which pins the upper bound of the harness itself: any score below 1.0
in this configuration would be a harness bug, not a model limitation.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from boxprompt import ImageDims, generate_synthetic, load_index
from boxprompt.backends import BoxFillSegmenter, OracleDetector, OracleSegmenter
from boxprompt.evaluation import evaluate_predictions
from boxprompt.pipeline import PipelineConfig, run_split

workdir = Path(tempfile.mkdtemp(prefix="boxprompt-demo-"))
root = generate_synthetic(count=15, dims=ImageDims(112, 112), seed=11, out_root=workdir / "data")
index = load_index(root)
index.records = [replace(r, split="test") for r in index.records]

config = PipelineConfig(timing=True)

print("oracle detector + oracle segmenter:")
run = run_split(index, "test", config, OracleDetector(root), OracleSegmenter(root), parallelism=4)
report, _ = evaluate_predictions(index, "test", {r.image_id: r for r in run.results})
print(f"  macro iou={report.macro.iou:.4f} dice={report.macro.dice:.4f}")
print(f"  micro iou={report.micro.iou:.4f}")
print(f"  detector mAP50={100 * report.map50:.1f}")
if report.fps:
    print(f"  latency: {report.fps.mean_total_ms:.2f} ms/image -> {report.fps.fps} fps")

# Swap only the segmenter: box fill is the floor a real promptable
# segmenter must beat, since it ignores everything inside the box.
print("\noracle detector + box-fill segmenter:")
run = run_split(index, "test", config, OracleDetector(root), BoxFillSegmenter(), parallelism=4)
report, _ = evaluate_predictions(index, "test", {r.image_id: r for r in run.results})
print(f"  macro iou={report.macro.iou:.4f} dice={report.macro.dice:.4f}")
print(f"  detector mAP50={100 * report.map50:.1f}  (same boxes, worse masks)")
