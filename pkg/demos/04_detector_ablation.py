"""Detector-quality ablation: how box degradation gates mask quality.

With the segmenter held fixed, the grid isolates the detection stage:
oracle boxes bound the pipeline from above, jittered boxes cost a
little, dropped boxes cost a lot. The ordering is the point.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from boxprompt import ImageDims, generate_synthetic, load_index
from boxprompt.ablation import AblationGrid, GridRow, format_grid_table, run_grid
from boxprompt.pipeline import PipelineConfig

workdir = Path(tempfile.mkdtemp(prefix="boxprompt-demo-"))
root = generate_synthetic(count=25, dims=ImageDims(112, 112), seed=3, out_root=workdir / "data")
index = load_index(root)
index.records = [replace(r, split="test") for r in index.records]

config = PipelineConfig(timing=False)
grid = AblationGrid(
    name="detector-quality",
    split="test",
    seed=2024,
    fixed_segmenter=True,
    rows=[
        GridRow("oracle-boxes", "oracle", "oracle", config, seed=2024),
        GridRow("jitter-2px", "perturbed:jitter_px=2", "oracle", config, seed=2025),
        GridRow("jitter-6px", "perturbed:jitter_px=6", "oracle", config, seed=2026),
        GridRow("drop-30pct", "perturbed:drop_rate=0.3", "oracle", config, seed=2027),
        GridRow("drop-plus-fp", "perturbed:drop_rate=0.3,fp_rate=0.5", "oracle", config, seed=2028),
    ],
)

report = run_grid(grid, index)
print(format_grid_table(report))
print("note: grids are usually declared in YAML; see docs/grid.example.yaml")
