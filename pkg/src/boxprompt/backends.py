"""Detector and segmenter backends, built-in and external.

Built-in backends are pure and seeded, so every experiment row is
reproducible byte-for-byte. External backends speak a line-delimited
JSON protocol over standard streams (one request line, one reply line);
the precomputed backend reads the identical reply payloads from
``<image_id>.det`` / ``<image_id>.seg`` files instead of calling a
process.

Wire protocol (UTF-8, one message per line):

- detect request:  ``{"op":"detect","image":"<path>","prompt":"bird",
  "box_threshold":0.30,"text_threshold":0.25}``
- detect reply:    ``{"detections":[{"box":[x1,y1,x2,y2],"score":0.97,
  "label":"bird"}]}``
- segment request: ``{"op":"segment","image":"<path>",
  "boxes":[[x1,y1,x2,y2],...]}``
- segment reply:   ``{"masks":[{"dims":[w,h],"rle":[...],"score":0.99},...]}``
- error reply:     ``{"error":"<message>"}``
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataset import ImageRecord
from .geometry import BoxXYXY, Detection, ImageDims, clip_box, nms
from .mask import BinaryMask, instance_boxes, load_mask, rasterize_box, rle_encode

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Backend failure, carrying the backend identity and a reply excerpt."""

    def __init__(self, backend: str, message: str, raw: str | None = None):
        excerpt = f" (reply: {raw[:200]!r})" if raw else ""
        super().__init__(f"[{backend}] {message}{excerpt}")
        self.backend = backend
        self.raw = raw


@dataclass(frozen=True)
class DetectorConfig:
    """Detection-stage thresholds for both operating modes.

    Grounded mode passes box/text thresholds through to the backend,
    whose semantics they belong to; supervised mode has the harness
    apply ``conf_threshold`` (strictly greater) and then NMS.
    """

    mode: str = "grounded"
    text_prompt: str = "bird"
    box_threshold: float = 0.30
    text_threshold: float = 0.25
    conf_threshold: float = 0.40
    nms_iou: float = 0.45

    def __post_init__(self) -> None:
        if self.mode not in ("grounded", "supervised"):
            raise ValueError(f"mode must be 'grounded' or 'supervised', got {self.mode!r}")
        for name in ("box_threshold", "text_threshold", "conf_threshold", "nms_iou"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} outside [0,1]: {value}")


@dataclass(frozen=True)
class SegmentRequest:
    """A batch of box prompts against one image."""

    record: ImageRecord
    boxes: tuple[BoxXYXY, ...]

    def __post_init__(self) -> None:
        dims = self.record.dims
        for box in self.boxes:
            if (
                box.x1 < -1e-6
                or box.y1 < -1e-6
                or box.x2 > dims.width + 1e-6
                or box.y2 > dims.height + 1e-6
            ):
                raise ValueError(f"prompt box {box} outside image {dims.width}x{dims.height}")


@dataclass(frozen=True)
class MaskCandidate:
    mask: BinaryMask
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence outside [0,1]: {self.confidence}")


class DetectorBackend(Protocol):
    identity: str

    def detect_raw(self, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
        """Return detections before any harness-side post-processing."""
        ...


class SegmenterBackend(Protocol):
    identity: str

    def segment_candidates(
        self, record: ImageRecord, boxes: Sequence[BoxXYXY]
    ) -> list[list[MaskCandidate]]:
        """Return one candidate list per prompt box."""
        ...


def detect(backend: DetectorBackend, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
    """Run a detector and apply the post-processing its mode calls for.

    Supervised mode filters ``score > conf_threshold`` and applies NMS;
    grounded mode trusts the backend's internal thresholds. Either way
    the output is sorted by score descending (ties keep backend order).
    """
    dets = backend.detect_raw(record, config)
    if config.mode == "supervised":
        dets = [d for d in dets if d.score > config.conf_threshold]
        dets = nms(dets, config.nms_iou)
    else:
        dets = sorted(dets, key=lambda d: -d.score)
    return dets


def select_candidate(candidates: list[MaskCandidate], rule: str) -> MaskCandidate:
    if rule == "highest-confidence":
        best = candidates[0]
        for cand in candidates[1:]:
            if cand.confidence > best.confidence:
                best = cand
        return best
    if rule == "first":
        return candidates[0]
    raise ValueError(f"unknown candidate selection rule {rule!r}")


def segment(
    backend: SegmenterBackend,
    request: SegmentRequest,
    selection: str = "highest-confidence",
) -> list[MaskCandidate]:
    """Run a segmenter, yielding exactly one chosen candidate per box.

    Masks not at native image resolution are rejected rather than
    resampled; resampling belongs in the backend.
    """
    if not request.boxes:
        return []
    candidate_lists = backend.segment_candidates(request.record, request.boxes)
    if len(candidate_lists) != len(request.boxes):
        raise BackendError(
            backend.identity,
            f"{len(request.boxes)} prompt boxes but {len(candidate_lists)} mask groups returned",
        )
    chosen: list[MaskCandidate] = []
    for candidates in candidate_lists:
        if not candidates:
            raise BackendError(backend.identity, "empty candidate list for a prompt box")
        pick = select_candidate(candidates, selection)
        if pick.mask.dims != request.record.dims:
            raise BackendError(
                backend.identity,
                f"mask at {pick.mask.dims.width}x{pick.mask.dims.height}, expected native "
                f"{request.record.dims.width}x{request.record.dims.height}",
            )
        chosen.append(pick)
    return chosen


def perturb_boxes(
    dets: Sequence[Detection],
    jitter_px: float = 0.0,
    scale_factor: float = 1.0,
    drop_rate: float = 0.0,
    fp_rate: float = 0.0,
    seed: int | Sequence[int] = 0,
    dims: ImageDims | None = None,
) -> list[Detection]:
    """Degrade detections along the detector-quality ablation axis.

    Deterministic under ``seed``. Each box is translated by a uniform
    offset in [-jitter_px, +jitter_px] per axis, scaled about its center
    by ``scale_factor``, and dropped with probability ``drop_rate``;
    spurious boxes are injected at rate ``fp_rate`` with scores drawn
    below the surviving true minimum. With all parameters neutral the
    input is returned unchanged. ``dims`` bounds transformed and
    injected boxes; it is required when ``fp_rate`` > 0.
    """
    if fp_rate > 0.0 and dims is None:
        raise ValueError("fp_rate > 0 requires image dims to place spurious boxes")
    rng = np.random.default_rng(seed)
    out: list[Detection] = []
    for det in dets:
        if drop_rate > 0.0 and rng.uniform() < drop_rate:
            continue
        box = det.box
        if jitter_px > 0.0:
            dx = float(rng.uniform(-jitter_px, jitter_px))
            dy = float(rng.uniform(-jitter_px, jitter_px))
            box = BoxXYXY(box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy)
        if scale_factor != 1.0:
            cx = (box.x1 + box.x2) / 2.0
            cy = (box.y1 + box.y2) / 2.0
            hw = box.width * scale_factor / 2.0
            hh = box.height * scale_factor / 2.0
            box = BoxXYXY(cx - hw, cy - hh, cx + hw, cy + hh)
        if box is not det.box and dims is not None:
            box = clip_box(box, dims)
        out.append(det if box is det.box else replace(det, box=box))
    if fp_rate > 0.0:
        assert dims is not None
        min_true = min((d.score for d in out), default=1.0)
        template_label = dets[0].label if dets else "bird"
        for _ in range(len(dets)):
            if rng.uniform() >= fp_rate:
                continue
            w = float(rng.uniform(0.05, 0.3) * dims.width)
            h = float(rng.uniform(0.05, 0.3) * dims.height)
            x1 = float(rng.uniform(0.0, dims.width - w))
            y1 = float(rng.uniform(0.0, dims.height - h))
            score = float(rng.uniform(0.5, 0.95) * min_true)
            out.append(Detection(BoxXYXY(x1, y1, x1 + w, y1 + h), score, template_label))
    return out


class OracleDetector:
    """Emits ground truth as detections with score 1.0.

    ``source="mask-components"`` derives one box per 8-connected
    foreground component of the GT mask (handles multi-instance images);
    ``source="annotation"`` emits the single annotated GT box.
    """

    def __init__(self, root: str | Path, source: str = "mask-components", min_area: int = 1):
        if source not in ("mask-components", "annotation"):
            raise ValueError(f"unknown oracle source {source!r}")
        self.root = Path(root)
        self.source = source
        self.min_area = min_area
        self.identity = f"oracle(source={source},min_area={min_area})"

    def detect_raw(self, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
        if self.source == "annotation":
            boxes = [record.gt_box]
        else:
            gt = load_mask(record.mask_path(self.root))
            boxes = instance_boxes(gt, min_area=self.min_area)
        return [Detection(box, 1.0, config.text_prompt) for box in boxes]


class PerturbedDetector:
    """Wraps another detector and degrades its output, seeded per image."""

    def __init__(
        self,
        inner: DetectorBackend,
        jitter_px: float = 0.0,
        scale_factor: float = 1.0,
        drop_rate: float = 0.0,
        fp_rate: float = 0.0,
        seed: int = 0,
    ):
        self.inner = inner
        self.jitter_px = jitter_px
        self.scale_factor = scale_factor
        self.drop_rate = drop_rate
        self.fp_rate = fp_rate
        self.seed = seed
        self.identity = (
            f"perturbed(jitter_px={jitter_px},scale={scale_factor},drop_rate={drop_rate},"
            f"fp_rate={fp_rate},seed={seed},inner={inner.identity})"
        )

    def detect_raw(self, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
        dets = self.inner.detect_raw(record, config)
        # per-image derived seed keeps results independent of execution order
        return perturb_boxes(
            dets,
            jitter_px=self.jitter_px,
            scale_factor=self.scale_factor,
            drop_rate=self.drop_rate,
            fp_rate=self.fp_rate,
            seed=(self.seed, record.image_id),
            dims=record.dims,
        )


class OracleSegmenter:
    """Returns the GT mask clipped to each prompt box: the upper bound a
    box-prompted segmenter can reach."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.identity = "oracle-segmenter"

    def segment_candidates(
        self, record: ImageRecord, boxes: Sequence[BoxXYXY]
    ) -> list[list[MaskCandidate]]:
        gt = load_mask(record.mask_path(self.root)).to_array()
        out = []
        for box in boxes:
            clipped = gt & rasterize_box(box, record.dims)
            out.append([MaskCandidate(rle_encode(clipped), 1.0)])
        return out


class BoxFillSegmenter:
    """Fills each prompt box: the lower bound a box-prompted segmenter
    should beat."""

    identity = "boxfill-segmenter"

    def segment_candidates(
        self, record: ImageRecord, boxes: Sequence[BoxXYXY]
    ) -> list[list[MaskCandidate]]:
        return [
            [MaskCandidate(rle_encode(rasterize_box(box, record.dims)), 1.0)] for box in boxes
        ]


def parse_detect_reply(reply: dict, backend: str, raw: str | None = None) -> list[Detection]:
    try:
        dets = []
        for item in reply["detections"]:
            x1, y1, x2, y2 = (float(v) for v in item["box"])
            dets.append(
                Detection(BoxXYXY(x1, y1, x2, y2), float(item["score"]), str(item.get("label", "")))
            )
        return dets
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(backend, f"malformed detect reply: {exc}", raw) from exc


def parse_segment_reply(reply: dict, backend: str, raw: str | None = None) -> list[MaskCandidate]:
    try:
        masks = []
        for item in reply["masks"]:
            width, height = (int(v) for v in item["dims"])
            counts = tuple(int(c) for c in item["rle"])
            masks.append(
                MaskCandidate(
                    BinaryMask(ImageDims(width=width, height=height), counts),
                    float(item["score"]),
                )
            )
        return masks
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError(backend, f"malformed segment reply: {exc}", raw) from exc


class ExternalProcessBackend:
    """Strict request/reply client for a backend process on std streams.

    One request is in flight at a time; parallelism comes from running
    multiple backend instances, never from interleaving requests.
    """

    def __init__(self, command: str | Sequence[str], root: str | Path, name: str | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.root = Path(root)
        self.identity = name or f"external({' '.join(self.command)})"
        self._proc: subprocess.Popen | None = None
        self._stderr_file = None

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._stderr_file = tempfile.TemporaryFile()
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=self._stderr_file,
                text=True,
            )
        return self._proc

    def _stderr_excerpt(self) -> str:
        if self._stderr_file is None:
            return ""
        try:
            self._stderr_file.seek(0)
            return self._stderr_file.read()[-500:].decode("utf-8", "replace")
        except OSError:
            return ""

    def request(self, payload: dict) -> dict:
        proc = self._ensure_started()
        try:
            assert proc.stdin is not None and proc.stdout is not None
            proc.stdin.write(json.dumps(payload) + "\n")
            proc.stdin.flush()
            raw = proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError(self.identity, f"process i/o failed: {exc}", self._stderr_excerpt())
        if not raw:
            code = proc.poll()
            raise BackendError(
                self.identity, f"process closed the stream (exit={code})", self._stderr_excerpt()
            )
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BackendError(self.identity, f"reply is not valid JSON: {exc}", raw) from exc
        if not isinstance(reply, dict):
            raise BackendError(self.identity, "reply is not a JSON object", raw)
        if "error" in reply:
            raise BackendError(self.identity, f"backend error: {reply['error']}", raw)
        return reply

    def detect_raw(self, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
        payload = {
            "op": "detect",
            "image": str(record.image_path(self.root)),
            "prompt": config.text_prompt,
            "box_threshold": config.box_threshold,
            "text_threshold": config.text_threshold,
        }
        reply = self.request(payload)
        return parse_detect_reply(reply, self.identity)

    def segment_candidates(
        self, record: ImageRecord, boxes: Sequence[BoxXYXY]
    ) -> list[list[MaskCandidate]]:
        payload = {
            "op": "segment",
            "image": str(record.image_path(self.root)),
            "boxes": [[b.x1, b.y1, b.x2, b.y2] for b in boxes],
        }
        reply = self.request(payload)
        return [[cand] for cand in parse_segment_reply(reply, self.identity)]

    def close(self) -> None:
        if self._proc is not None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None
        if self._stderr_file is not None:
            self._stderr_file.close()
            self._stderr_file = None

    def __enter__(self) -> "ExternalProcessBackend":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class PrecomputedBackend:
    """Replays reply payloads from ``<image_id>.det`` / ``<image_id>.seg``
    files instead of calling a process."""

    def __init__(self, reply_dir: str | Path, root: str | Path | None = None):
        self.reply_dir = Path(reply_dir)
        self.identity = f"precomputed({self.reply_dir})"

    def _load(self, record: ImageRecord, suffix: str) -> tuple[dict, str]:
        path = self.reply_dir / f"{record.image_id}{suffix}"
        if not path.is_file():
            raise BackendError(self.identity, f"missing reply file {path}")
        raw = path.read_text(encoding="utf-8")
        try:
            reply = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise BackendError(self.identity, f"{path}: invalid JSON: {exc}", raw) from exc
        if "error" in reply:
            raise BackendError(self.identity, f"backend error: {reply['error']}", raw)
        return reply, raw

    def detect_raw(self, record: ImageRecord, config: DetectorConfig) -> list[Detection]:
        reply, raw = self._load(record, ".det")
        return parse_detect_reply(reply, self.identity, raw)

    def segment_candidates(
        self, record: ImageRecord, boxes: Sequence[BoxXYXY]
    ) -> list[list[MaskCandidate]]:
        reply, raw = self._load(record, ".seg")
        return [[cand] for cand in parse_segment_reply(reply, self.identity, raw)]


def _parse_kv_options(text: str, spec: str) -> dict[str, str]:
    options: dict[str, str] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad backend option {part!r} in spec {spec!r} (expected key=value)")
        key, value = part.split("=", 1)
        options[key.strip()] = value.strip()
    return options


def resolve_detector(spec: str, root: str | Path, default_seed: int = 0):
    """Build a detector backend (or per-worker factory) from a spec string.

    Spec grammar: ``oracle[:source=...,min_area=N]``,
    ``perturbed:[jitter_px=..,scale=..,drop_rate=..,fp_rate=..,seed=..]``,
    ``external:<command line>``, ``precomputed:<reply dir>``.
    ``default_seed`` applies to seeded backends whose spec omits ``seed=``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        opts = _parse_kv_options(rest, spec)
        return OracleDetector(
            root,
            source=opts.pop("source", "mask-components"),
            min_area=int(opts.pop("min_area", "1")),
        )
    if kind == "perturbed":
        opts = _parse_kv_options(rest, spec)
        inner = OracleDetector(root, source=opts.pop("source", "mask-components"))
        return PerturbedDetector(
            inner,
            jitter_px=float(opts.pop("jitter_px", "0")),
            scale_factor=float(opts.pop("scale", "1")),
            drop_rate=float(opts.pop("drop_rate", "0")),
            fp_rate=float(opts.pop("fp_rate", "0")),
            seed=int(opts.pop("seed", str(default_seed))),
        )
    if kind == "external":
        if not rest:
            raise ValueError(f"external spec needs a command: {spec!r}")
        return lambda: ExternalProcessBackend(rest, root)
    if kind == "precomputed":
        if not rest:
            raise ValueError(f"precomputed spec needs a directory: {spec!r}")
        return PrecomputedBackend(rest, root)
    raise ValueError(f"unknown detector backend kind {kind!r}")


def resolve_segmenter(spec: str, root: str | Path):
    """Build a segmenter backend (or per-worker factory) from a spec string.

    Spec grammar: ``oracle``, ``boxfill``, ``external:<command line>``,
    ``precomputed:<reply dir>``.
    """
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        return OracleSegmenter(root)
    if kind == "boxfill":
        return BoxFillSegmenter()
    if kind == "external":
        if not rest:
            raise ValueError(f"external spec needs a command: {spec!r}")
        return lambda: ExternalProcessBackend(rest, root)
    if kind == "precomputed":
        if not rest:
            raise ValueError(f"precomputed spec needs a directory: {spec!r}")
        return PrecomputedBackend(rest, root)
    raise ValueError(f"unknown segmenter backend kind {kind!r}")


def backend_identity(backend_or_factory) -> str:
    """Identity string of a backend instance or factory (for manifests)."""
    if callable(backend_or_factory) and not hasattr(backend_or_factory, "identity"):
        instance = backend_or_factory()
        try:
            return instance.identity
        finally:
            close = getattr(instance, "close", None)
            if close is not None:
                close()
    return backend_or_factory.identity
