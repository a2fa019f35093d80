"""Multi-configuration experiment grids and comparison reports.

A grid declares named rows of (detector spec, segmenter spec, pipeline
overrides) evaluated on one shared split, so a detector-quality
comparison is a single command. Per-row seeds derive from the grid seed
plus the row index: rows are independent yet reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backends import resolve_detector, resolve_segmenter
from .dataset import DatasetIndex
from .evaluation import AggregateReport, evaluate_predictions
from .pipeline import PipelineConfig, build_manifest, run_split

logger = logging.getLogger(__name__)


class GridError(ValueError):
    """Raised for malformed grid configuration files."""


@dataclass(frozen=True)
class GridRow:
    name: str
    detector: str
    segmenter: str
    config: PipelineConfig
    seed: int


@dataclass
class AblationGrid:
    name: str
    split: str
    seed: int
    fixed_segmenter: bool
    rows: list[GridRow]

    def __post_init__(self) -> None:
        names = [row.name for row in self.rows]
        if len(set(names)) != len(names):
            raise GridError(f"grid row names must be unique, got {names}")
        if not self.rows:
            raise GridError("grid declares no rows")
        if self.fixed_segmenter:
            segs = {row.segmenter for row in self.rows}
            if len(segs) != 1:
                raise GridError(f"fixed_segmenter grid has differing segmenters: {segs}")


@dataclass
class GridRowOutcome:
    name: str
    detector: str
    segmenter: str
    failed: bool = False
    error: str | None = None
    report: AggregateReport | None = None
    manifest: dict | None = None
    n_failures: int = 0


@dataclass
class GridReport:
    grid_name: str
    split: str
    outcomes: list[GridRowOutcome] = field(default_factory=list)


def _merge_pipeline_dict(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key == "detector" and isinstance(value, dict):
            det = dict(merged.get("detector", {}))
            det.update(value)
            merged["detector"] = det
        else:
            merged[key] = value
    return merged


def load_grid(path: str | Path) -> AblationGrid:
    """Parse a grid configuration file (YAML; see docs/grid.example.yaml)."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise GridError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise GridError(f"{path}: grid file must hold a mapping")
    try:
        split = str(data["split"])
        rows_data = data["rows"]
    except KeyError as exc:
        raise GridError(f"{path}: missing required key {exc}") from exc
    if not isinstance(rows_data, list) or not rows_data:
        raise GridError(f"{path}: 'rows' must be a non-empty list")

    grid_seed = int(data.get("seed", 0))
    fixed_segmenter = bool(data.get("fixed_segmenter", False))
    grid_segmenter = data.get("segmenter")
    base_pipeline = data.get("pipeline", {}) or {}

    rows: list[GridRow] = []
    for idx, row in enumerate(rows_data):
        if not isinstance(row, dict) or "detector" not in row:
            raise GridError(f"{path}: row {idx} must be a mapping with a 'detector' key")
        name = str(row.get("name", f"row-{idx}"))
        if fixed_segmenter:
            if "segmenter" in row and row["segmenter"] != grid_segmenter:
                raise GridError(
                    f"{path}: row {name!r} overrides the segmenter but fixed_segmenter is set"
                )
            segmenter = grid_segmenter
        else:
            segmenter = row.get("segmenter", grid_segmenter)
        if not segmenter:
            raise GridError(f"{path}: row {name!r} has no segmenter and no grid default")
        merged = _merge_pipeline_dict(base_pipeline, row.get("pipeline", {}) or {})
        try:
            config = PipelineConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise GridError(f"{path}: row {name!r}: bad pipeline config: {exc}") from exc
        rows.append(
            GridRow(
                name=name,
                detector=str(row["detector"]),
                segmenter=str(segmenter),
                config=config,
                seed=grid_seed + idx,
            )
        )
    return AblationGrid(
        name=str(data.get("name", path.stem)),
        split=split,
        seed=grid_seed,
        fixed_segmenter=fixed_segmenter,
        rows=rows,
    )


def run_grid(grid: AblationGrid, index: DatasetIndex, parallelism: int = 1) -> GridReport:
    """Evaluate every grid row on the shared split.

    A row that fails entirely is marked failed and the grid continues.
    With ``fixed_segmenter`` the per-row segmenter identities are
    asserted identical from the manifests.
    """
    report = GridReport(grid_name=grid.name, split=grid.split)
    for row in grid.rows:
        outcome = GridRowOutcome(name=row.name, detector=row.detector, segmenter=row.segmenter)
        try:
            detector = resolve_detector(row.detector, index.root, default_seed=row.seed)
            segmenter = resolve_segmenter(row.segmenter, index.root)
            manifest = build_manifest(
                row.config, index, grid.split, detector, segmenter, seed=row.seed
            )
            run = run_split(index, grid.split, row.config, detector, segmenter, parallelism)
            results_by_id = {r.image_id: r for r in run.results}
            row_report, _missing = evaluate_predictions(index, grid.split, results_by_id)
            outcome.report = row_report
            outcome.manifest = manifest
            outcome.n_failures = len(run.failures)
        except Exception as exc:
            logger.exception("grid row %s failed", row.name)
            outcome.failed = True
            outcome.error = str(exc)
        report.outcomes.append(outcome)

    if grid.fixed_segmenter:
        identities = {
            o.manifest["backends"]["segmenter"] for o in report.outcomes if o.manifest is not None
        }
        if len(identities) > 1:
            raise GridError(f"fixed-segmenter grid produced differing segmenters: {identities}")
    return report


def format_grid_table(report: GridReport) -> str:
    """Tab-delimited comparison table, rows in declared order."""
    lines = ["row\tmap50\tiou\tdice\tf1\tn_images\tfailures\tstatus"]
    for o in report.outcomes:
        if o.failed or o.report is None:
            lines.append(f"{o.name}\t-\t-\t-\t-\t-\t-\tFAILED: {o.error}")
            continue
        r = o.report
        map50 = "-" if r.map50 is None else f"{100.0 * r.map50:.1f}"
        lines.append(
            f"{o.name}\t{map50}\t{r.macro.iou:.4f}\t{r.macro.dice:.4f}\t{r.macro.f1:.4f}"
            f"\t{r.n_images}\t{o.n_failures}\tok"
        )
    return "\n".join(lines) + "\n"


def grid_report_to_dict(report: GridReport) -> dict:
    from .evaluation import report_to_dict

    return {
        "grid": report.grid_name,
        "split": report.split,
        "rows": [
            {
                "name": o.name,
                "detector": o.detector,
                "segmenter": o.segmenter,
                "failed": o.failed,
                "error": o.error,
                "n_failures": o.n_failures,
                "report": None if o.report is None else report_to_dict(o.report, method=o.name),
                "manifest": o.manifest,
            }
            for o in report.outcomes
        ],
    }


def write_grid_report(report: GridReport, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out_dir / "ablation.tsv",
        "json": out_dir / "ablation.json",
    }
    paths["table"].write_text(format_grid_table(report), encoding="utf-8")
    paths["json"].write_text(
        json.dumps(grid_report_to_dict(report), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return paths
