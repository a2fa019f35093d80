"""Command-line surface for the harness.

Exit codes follow one contract everywhere: 0 success, 1 completed with
per-image failures, 2 usage or configuration error. Every command
writes a machine-readable summary next to its human-readable output,
and is idempotent for identical inputs and --out. ``BOXPROMPT_ROOT``
and ``BOXPROMPT_OUT`` provide defaults for --root / --out.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .ablation import GridError, load_grid, run_grid, write_grid_report
from .backends import BackendError, resolve_detector, resolve_segmenter
from .dataset import (
    DatasetError,
    DatasetIndex,
    SplitSpec,
    assign_splits,
    export_yolo,
    generate_synthetic,
    load_index,
    mask_box_violations,
    read_split_file,
    write_split_file,
)
from .evaluation import (
    StageTimingsLike,
    evaluate_predictions,
    fps_summary,
    write_reports,
)
from .geometry import BoxXYXY, Detection, ImageDims
from .mask import mask_from_payload
from .pipeline import (
    PipelineConfig,
    build_manifest,
    run_split,
    write_manifest,
    write_predictions,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _parse_fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"--splits needs three comma-separated fractions, got {text!r}")
    return parts[0], parts[1], parts[2]


def _parse_dims(text: str) -> ImageDims:
    w, _, h = text.lower().partition("x")
    return ImageDims(width=int(w), height=int(h))


def _load_split_index(args) -> DatasetIndex:
    index = load_index(args.root)
    if getattr(args, "split_file", None):
        return read_split_file(index, args.split_file)
    fractions = _parse_fractions(args.splits)
    spec = SplitSpec(
        train_fraction=fractions[0],
        val_fraction=fractions[1],
        test_fraction=fractions[2],
        seed=args.seed,
    )
    return assign_splits(index, spec)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_prepare(args) -> int:
    index = _load_split_index(args)
    out = Path(args.out or Path(args.root) / "splits.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_split_file(index, out)
    sizes = {name: len(index.by_split(name)) for name in ("train", "val", "test")}
    summary = {
        "split_file": str(out),
        "records": len(index),
        "sizes": sizes,
        "skipped": index.skipped,
        "seed": args.seed,
    }
    if args.validate_masks:
        violations = mask_box_violations(index)
        summary["mask_outside_box"] = {"count": len(violations), "image_ids": violations[:50]}
    _write_json(out.with_suffix(".summary.json"), summary)
    print(f"wrote {out}: train={sizes['train']} val={sizes['val']} test={sizes['test']}")
    if index.skipped:
        print(f"excluded records: {index.skipped}")
    if args.validate_masks and summary["mask_outside_box"]["count"]:
        print(
            f"note: {summary['mask_outside_box']['count']} record(s) have mask foreground "
            "more than 1 px outside the annotated box"
        )
    return EXIT_OK


def cmd_export_yolo(args) -> int:
    index = _load_split_index(args)
    count = export_yolo(index, args.split, args.out)
    summary = {"split": args.split, "out": str(args.out), "labels_written": count}
    _write_json(Path(args.out) / "export.summary.json", summary)
    print(f"wrote {count} label files for split {args.split!r} to {args.out}")
    return EXIT_OK


def _pipeline_config_from_args(args) -> PipelineConfig:
    file_dict: dict = {}
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: pipeline config must be a mapping")
        file_dict = loaded or {}

    # a config file never silently overrides an explicit flag
    flag_overrides = {}
    if args.aggregation is not None:
        flag_overrides["aggregation"] = args.aggregation
    if args.timing is not None:
        flag_overrides["timing"] = args.timing
    for key, flag_value in flag_overrides.items():
        if key in file_dict and file_dict[key] != flag_value:
            raise ConfigConflict(
                f"--{key.replace('_', '-')}={flag_value!r} conflicts with "
                f"{key}={file_dict[key]!r} in {args.config}"
            )
    merged = dict(file_dict)
    merged.update(flag_overrides)
    return PipelineConfig.from_dict(merged)


class ConfigConflict(ValueError):
    pass


def cmd_run(args) -> int:
    index = _load_split_index(args)
    config = _pipeline_config_from_args(args)
    detector = resolve_detector(args.detector, index.root)
    segmenter = resolve_segmenter(args.segmenter, index.root)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(config, index, args.split, detector, segmenter, seed=args.seed)
    run = run_split(index, args.split, config, detector, segmenter, parallelism=args.jobs)
    write_predictions(run, out_dir, include_timings=config.timing)
    write_manifest(manifest, out_dir / "manifest.json")
    write_split_file(index, out_dir / "splits.txt")
    summary = {
        "out": str(out_dir),
        "split": args.split,
        "images": len(run.results) + len(run.failures),
        "succeeded": len(run.results),
        "failed": [{"image_id": f.image_id, "error": f.error} for f in run.failures],
    }
    _write_json(out_dir / "run.summary.json", summary)
    print(
        f"ran {summary['images']} images of split {args.split!r}: "
        f"{summary['succeeded']} ok, {len(run.failures)} failed -> {out_dir}"
    )
    return EXIT_PARTIAL if run.failures else EXIT_OK


@dataclass
class _LoadedPrediction:
    aggregate_mask: object
    detections: list
    timings: object


def _load_prediction_file(path: Path) -> _LoadedPrediction:
    data = json.loads(path.read_text(encoding="utf-8"))
    detections = [
        Detection(BoxXYXY(*[float(v) for v in d["box"]]), float(d["score"]), str(d.get("label", "")))
        for d in data["detections"]
    ]
    timings = None
    if "timings" in data:
        t = data["timings"]
        timings = StageTimingsLike(
            detect_ms=float(t.get("detect_ms", 0.0)),
            segment_ms=float(t.get("segment_ms", 0.0)),
            total_ms=float(t.get("total_ms", 0.0)),
        )
    return _LoadedPrediction(
        aggregate_mask=mask_from_payload(data["mask"]),
        detections=detections,
        timings=timings,
    )


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    manifest_path = pred_dir / "manifest.json"
    split = args.split
    if split is None:
        if not manifest_path.is_file():
            raise ValueError(f"no --split given and {manifest_path} not found")
        split = json.loads(manifest_path.read_text(encoding="utf-8"))["split"]

    index = load_index(args.root)
    split_file = args.split_file or (
        pred_dir / "splits.txt" if (pred_dir / "splits.txt").is_file() else None
    )
    if split_file is None:
        raise ValueError("eval needs a split assignment: pass --split-file or keep splits.txt beside predictions")
    index = read_split_file(index, split_file)

    predictions = {}
    for rec in index.by_split(split):
        path = pred_dir / f"{rec.image_id}.pred.json"
        if path.is_file():
            predictions[rec.image_id] = _load_prediction_file(path)
    manifest_ref = str(manifest_path) if manifest_path.is_file() else None
    report, missing = evaluate_predictions(
        index, split, predictions, per_class_threshold=args.class_threshold, manifest_ref=manifest_ref
    )
    paths = write_reports(report, args.out, method=args.method)
    print(f"evaluated {report.n_images} images -> {paths['report']}")
    print(
        f"macro iou={report.macro.iou:.4f} dice={report.macro.dice:.4f} "
        f"map50={'-' if report.map50 is None else f'{100.0 * report.map50:.1f}'}"
    )
    if missing:
        print(f"warning: {len(missing)} image(s) had no prediction; scored as all-background")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = load_grid(args.grid)
    index = _load_split_index(args)
    report = run_grid(grid, index, parallelism=args.jobs)
    paths = write_grid_report(report, args.out)
    print(f"grid {grid.name!r}: {len(report.outcomes)} rows -> {paths['table']}")
    for outcome in report.outcomes:
        if outcome.failed:
            print(f"  {outcome.name}: FAILED ({outcome.error})")
        else:
            r = outcome.report
            map50 = "-" if r.map50 is None else f"{100.0 * r.map50:.1f}"
            print(f"  {outcome.name}: iou={r.macro.iou:.4f} map50={map50}")
    any_bad = any(o.failed or o.n_failures for o in report.outcomes)
    return EXIT_PARTIAL if any_bad else EXIT_OK


def _read_timings_file(path: Path) -> list[StageTimingsLike]:
    """CSV with a header naming detect_ms / segment_ms / total_ms columns.
    Missing stage columns count as zero."""
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty timings file")
    header = [h.strip() for h in lines[0].split(",")]
    if "total_ms" not in header:
        raise ValueError(f"{path}: header must name a total_ms column")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        row = dict(zip(header, cells))
        rows.append(
            StageTimingsLike(
                detect_ms=float(row.get("detect_ms") or 0.0),
                segment_ms=float(row.get("segment_ms") or 0.0),
                total_ms=float(row["total_ms"]),
            )
        )
    return rows


def cmd_bench(args) -> int:
    timings = _read_timings_file(Path(args.timings))
    summary = fps_summary(timings)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = (
        f"n={summary.n}\n"
        f"mean detect: {summary.mean_detect_ms:.1f} ms\n"
        f"mean segment: {summary.mean_segment_ms:.1f} ms\n"
        f"mean overhead: {summary.mean_overhead_ms:.1f} ms\n"
        f"mean total: {summary.mean_total_ms:.1f} ms\n"
        f"throughput: {summary.fps} FPS ({summary.fps_unrounded:.1f})\n"
    )
    (out_dir / "bench.txt").write_text(text, encoding="utf-8")
    _write_json(
        out_dir / "bench.json",
        {
            "n": summary.n,
            "mean_detect_ms": summary.mean_detect_ms,
            "mean_segment_ms": summary.mean_segment_ms,
            "mean_overhead_ms": summary.mean_overhead_ms,
            "mean_total_ms": summary.mean_total_ms,
            "fps": summary.fps,
            "fps_unrounded": summary.fps_unrounded,
        },
    )
    print(f"{summary.fps} FPS (mean total {summary.mean_total_ms:.1f} ms over {summary.n} timings)")
    return EXIT_OK


def cmd_synth(args) -> int:
    dims = _parse_dims(args.dims)
    root = generate_synthetic(args.n, dims, args.seed, args.out)
    _write_json(
        root / "synth.summary.json",
        {"root": str(root), "count": args.n, "dims": [dims.width, dims.height], "seed": args.seed},
    )
    print(f"generated {args.n} synthetic images at {root}")
    return EXIT_OK


def _add_split_source_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="split permutation seed")
    parser.add_argument("--splits", default="0.70,0.15,0.15", help="train,val,test fractions")
    parser.add_argument("--split-file", default=None, help="use an existing split file instead")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxprompt",
        description="Box-prompted segmentation pipeline harness and evaluation toolkit",
    )
    parser.add_argument("--version", action="version", version=f"boxprompt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    env_root = os.environ.get("BOXPROMPT_ROOT")
    env_out = os.environ.get("BOXPROMPT_OUT")

    def add_root(p):
        p.add_argument("--root", default=env_root, required=env_root is None, help="dataset root")

    def add_out(p, required=True):
        p.add_argument("--out", default=env_out, required=required and env_out is None,
                       help="output path")

    p = sub.add_parser("prepare", help="validate a dataset root and write the split file")
    add_root(p)
    _add_split_source_args(p)
    p.add_argument("--out", default=None, help="split file path (default: <root>/splits.txt)")
    masks = p.add_mutually_exclusive_group()
    masks.add_argument("--validate-masks", dest="validate_masks", action="store_true", default=True,
                       help="report records whose mask leaves the annotated box (default)")
    masks.add_argument("--no-validate-masks", dest="validate_masks", action="store_false")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("export-yolo", help="export single-class detector labels for a split")
    add_root(p)
    add_out(p)
    _add_split_source_args(p)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.set_defaults(func=cmd_export_yolo)

    p = sub.add_parser("run", help="run detect -> prompt-segment -> aggregate over a split")
    add_root(p)
    add_out(p)
    _add_split_source_args(p)
    p.add_argument("--split", required=True, choices=("train", "val", "test"))
    p.add_argument("--detector", required=True, help="detector backend spec")
    p.add_argument("--segmenter", required=True, help="segmenter backend spec")
    p.add_argument("--config", default=None, help="pipeline config YAML")
    p.add_argument("--aggregation", default=None, choices=("union", "per-instance"))
    timing = p.add_mutually_exclusive_group()
    timing.add_argument("--timing", dest="timing", action="store_true", default=None)
    timing.add_argument("--no-timing", dest="timing", action="store_false", default=None)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker pool size")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a predictions directory against ground truth")
    add_root(p)
    add_out(p)
    p.add_argument("--pred", required=True, help="predictions directory from 'run'")
    p.add_argument("--split", default=None, help="split name (default: from manifest)")
    p.add_argument("--split-file", default=None, help="split file (default: splits.txt beside predictions)")
    p.add_argument("--class-threshold", type=float, default=0.85,
                   help="per-class mean-IoU threshold for the above-count")
    p.add_argument("--method", default="run", help="method label for report rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a multi-row experiment grid")
    add_root(p)
    add_out(p)
    _add_split_source_args(p)
    p.add_argument("--grid", required=True, help="grid configuration YAML")
    p.add_argument("--jobs", type=int, default=1, help="per-row image parallelism")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="summarize a stage-timings file into FPS")
    add_out(p)
    p.add_argument("--timings", required=True, help="CSV with detect_ms,segment_ms,total_ms")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset root")
    add_out(p)
    p.add_argument("--n", type=int, required=True, help="image count")
    p.add_argument("--dims", default="128x128", help="image size WxH")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DatasetError, GridError, ConfigConflict, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
