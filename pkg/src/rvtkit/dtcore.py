"""Domain data model: digital twins, benchmark samples, masks, and their
serialization and validation.

All values are treated as immutable after construction; share them freely
between workers and never mutate in place.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ValidationFailure

logger = logging.getLogger(__name__)

Box = tuple[int, int, int, int]  # (x, y, w, h) in pixels


class DimensionError(ValidationFailure):
    pass


class CorruptionError(ValidationFailure):
    pass


class SchemaError(ValidationFailure):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class ArgumentError(ValidationFailure):
    pass


class TaskType(str, Enum):
    SEGMENTATION = "segmentation"
    GROUNDING = "grounding"
    SUMMARY = "summary"
    VQA = "vqa"


class ReasoningCategory(str, Enum):
    SEMANTIC = "semantic"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


# Relation vocabulary used in FrameRecord.spatial_relations. Depth relations
# come from comparing instance depth means, planar relations from centroids.
DEPTH_RELATIONS = ("same_distance", "in_front", "behind")
PLANAR_RELATIONS = ("left_of", "right_of", "above", "below", "next_to")

RELATION_INVERSE = {
    "same_distance": "same_distance",
    "in_front": "behind",
    "behind": "in_front",
    "left_of": "right_of",
    "right_of": "left_of",
    "above": "below",
    "below": "above",
    "next_to": "next_to",
}


@dataclass(frozen=True)
class SpatialRelation:
    subject: str
    relation: str
    object: str

    def inverted(self) -> "SpatialRelation":
        return SpatialRelation(self.object, RELATION_INVERSE[self.relation], self.subject)

    def to_list(self) -> list[str]:
        return [self.subject, self.relation, self.object]


@dataclass(frozen=True)
class MaskRLE:
    """Column-major run-length encoding of a binary mask.

    ``counts`` always begins with the run of zeros (possibly 0), matching
    COCO RLE semantics so released COCO-style annotations load unchanged.
    """

    size: tuple[int, int]  # (H, W)
    counts: tuple[int, ...]

    def area(self) -> int:
        return sum(self.counts[1::2])

    def is_empty(self) -> bool:
        return self.area() == 0


def encode_rle(bitmap: Any) -> MaskRLE:
    """Encode a binary H x W grid as column-major RLE starting with zeros."""
    arr = np.asarray(bitmap)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"bitmap must be a non-empty 2-D grid, got shape {arr.shape}")
    h, w = arr.shape
    flat = (arr != 0).astype(np.uint8).ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return MaskRLE(size=(h, w), counts=tuple(int(c) for c in runs))


def decode_rle(rle: MaskRLE) -> np.ndarray:
    """Decode back to a binary uint8 grid; exact inverse of :func:`encode_rle`."""
    h, w = rle.size
    counts = rle.counts
    if any(c < 0 for c in counts):
        raise CorruptionError(f"negative run length in counts {counts}")
    total = sum(counts)
    if total != h * w:
        raise CorruptionError(f"counts sum {total} != {h}*{w}={h * w}")
    values = np.arange(len(counts), dtype=np.uint8) % 2
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def mask_bbox(rle: MaskRLE) -> Optional[Box]:
    """Tight (x, y, w, h) box around the mask, or None for an empty mask."""
    if rle.is_empty():
        return None
    m = decode_rle(rle)
    cols = np.flatnonzero(m.any(axis=0))
    rows = np.flatnonzero(m.any(axis=1))
    x0, x1 = int(cols[0]), int(cols[-1])
    y0, y1 = int(rows[0]), int(rows[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


@dataclass(frozen=True)
class DepthStats:
    """Population mean/std of normalized depth (0-255) over a mask."""

    mean: float
    std: float


@dataclass(frozen=True)
class VisualFeatures:
    color_histogram: tuple[tuple[float, ...], ...]  # 3 channels x 8 bins, each sums to 1
    motion: tuple[float, float]  # mean optical-flow (dx, dy), px/frame
    texture: float  # gradient-energy statistic


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: str
    mask: MaskRLE
    confidence: float
    description: str
    depth_stats: Optional[DepthStats] = None
    visual_features: Optional[VisualFeatures] = None
    centroid: Optional[tuple[float, float]] = None  # (x, y) in pixels


@dataclass(frozen=True)
class FrameRecord:
    timestamp: int  # 1-indexed frame number
    scene_description: str
    spatial_description: str
    instances: dict[str, InstanceRecord]
    spatial_relations: tuple[SpatialRelation, ...] = ()
    propagated: bool = False  # True when captions were copied from a key frame


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    description: str
    duration: int  # total frame count T
    resolution: tuple[int, int]  # (H, W)
    fps: float = 30.0
    source: str = ""


@dataclass(frozen=True)
class DigitalTwin:
    metadata: VideoMeta
    frames: tuple[FrameRecord, ...]
    keyframe_indices: frozenset[int] = frozenset()

    def instance_ids(self) -> set[str]:
        ids: set[str] = set()
        for f in self.frames:
            ids.update(f.instances)
        return ids

    def first_seen(self) -> dict[str, int]:
        """Earliest timestamp at which each instance carries a non-empty mask."""
        seen: dict[str, int] = {}
        for f in self.frames:
            for iid, inst in f.instances.items():
                if iid not in seen and not inst.mask.is_empty():
                    seen[iid] = f.timestamp
        return seen

    def frame_at(self, timestamp: int) -> Optional[FrameRecord]:
        for f in self.frames:
            if f.timestamp == timestamp:
                return f
        return None


@dataclass(frozen=True)
class MaskSequence:
    """Per-frame lists of masks; an empty list marks a frame with no target."""

    frames: dict[int, tuple[MaskRLE, ...]]

    kind = "masks"


@dataclass(frozen=True)
class BoxSequence:
    frames: dict[int, tuple[Box, ...]]

    kind = "boxes"


@dataclass(frozen=True)
class TextAnswer:
    text: str

    kind = "text"


GroundTruth = MaskSequence | BoxSequence | TextAnswer

GROUND_TRUTH_KIND_FOR_TASK = {
    TaskType.SEGMENTATION: "masks",
    TaskType.GROUNDING: "boxes",
    TaskType.SUMMARY: "text",
    TaskType.VQA: "text",
}


@dataclass(frozen=True)
class RVTSample:
    """One benchmark tuple: video, task, query, categories, level, ground truth."""

    sample_id: str
    video_id: str
    task: TaskType
    query: str
    categories: frozenset[ReasoningCategory]
    level: int
    ground_truth: GroundTruth
    target_instance_id: str
    subtree_ref: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    path: str
    rule: str
    severity: str = "error"  # "error" | "warning"

    def __str__(self) -> str:
        return f"[{self.severity}] {self.path}: {self.rule}"


def errors_only(violations: Iterable[Violation]) -> list[Violation]:
    return [v for v in violations if v.severity == "error"]


def validate_twin(twin: DigitalTwin, mode: str = "full") -> list[Violation]:
    """Check every structural invariant; returns violations, never raises.

    ``mode="partial"`` tolerates absent depth stats, visual features, and
    spatial/scene descriptions (capability-gated twins built by the agent).
    """
    if mode not in ("full", "partial"):
        raise ArgumentError(f"unknown validation mode {mode!r}")
    partial = mode == "partial"
    out: list[Violation] = []
    meta = twin.metadata
    h, w = meta.resolution
    if not meta.video_id:
        out.append(Violation("metadata.video_id", "must be non-empty"))
    if meta.duration < 1:
        out.append(Violation("metadata.duration", "frame count must be >= 1"))
    if h < 1 or w < 1:
        out.append(Violation("metadata.resolution", "H and W must be >= 1"))
    if meta.fps <= 0:
        out.append(Violation("metadata.fps", "must be positive"))
    if not partial and not meta.description:
        out.append(Violation("metadata.description", "must be non-empty"))

    if not twin.frames:
        out.append(Violation("frames", "empty frame set", severity="warning"))
    if len(twin.frames) > meta.duration:
        out.append(Violation("frames", f"{len(twin.frames)} frames exceed duration {meta.duration}"))

    timestamps: list[int] = []
    seen_ts: set[int] = set()
    for i, frame in enumerate(twin.frames):
        path = f"frames[{i}]"
        t = frame.timestamp
        if t in seen_ts:
            out.append(Violation("frames", f"duplicate timestamp {t}"))
        elif timestamps and t < timestamps[-1]:
            out.append(Violation("frames", f"timestamps not strictly increasing at {t}"))
        seen_ts.add(t)
        timestamps.append(t)
        if not 1 <= t <= meta.duration:
            out.append(Violation(f"{path}.timestamp", f"{t} outside [1, {meta.duration}]"))
        out.extend(_validate_frame(frame, path, (h, w), partial))

    missing_keys = set(twin.keyframe_indices) - seen_ts
    if missing_keys:
        out.append(Violation("keyframe_indices", f"not recorded as frames: {sorted(missing_keys)}"))
    return out


def _validate_frame(
    frame: FrameRecord, path: str, resolution: tuple[int, int], partial: bool
) -> list[Violation]:
    out: list[Violation] = []
    h, w = resolution
    for rel in frame.spatial_relations:
        if rel.relation not in RELATION_INVERSE:
            out.append(Violation(f"{path}.spatial_relations", f"unknown relation {rel.relation!r}"))
    for iid, inst in sorted(frame.instances.items()):
        ipath = f"{path}.instances[{iid}]"
        if inst.mask.size != (h, w):
            out.append(
                Violation(ipath, f"mask size {list(inst.mask.size)} != video resolution {[h, w]}")
            )
        else:
            total = sum(inst.mask.counts)
            if any(c < 0 for c in inst.mask.counts):
                out.append(Violation(f"{ipath}.mask", "negative run length"))
            elif total != h * w:
                out.append(Violation(f"{ipath}.mask", f"counts sum {total} != {h * w}"))
        if not 0.0 <= inst.confidence <= 1.0:
            out.append(Violation(f"{ipath}.confidence", f"{inst.confidence} outside [0, 1]"))

        empty = inst.mask.is_empty()
        if inst.depth_stats is not None:
            if empty:
                out.append(Violation(f"{ipath}.depth_stats", "present for an empty mask"))
            if inst.depth_stats.std < 0:
                out.append(Violation(f"{ipath}.depth_stats", "std must be >= 0"))
            if not 0.0 <= inst.depth_stats.mean <= 255.0:
                out.append(Violation(f"{ipath}.depth_stats", "mean outside [0, 255]"))
        elif not partial and not empty:
            out.append(Violation(f"{ipath}.depth_stats", "missing for a non-empty mask"))

        if inst.visual_features is not None:
            hist = inst.visual_features.color_histogram
            if len(hist) != 3 or any(len(ch) != 8 for ch in hist):
                out.append(Violation(f"{ipath}.visual_features", "color histogram must be 3x8"))
            else:
                for c, channel in enumerate(hist):
                    if abs(sum(channel) - 1.0) > 1e-6:
                        out.append(
                            Violation(
                                f"{ipath}.visual_features.color_histogram[{c}]",
                                "bins must sum to 1",
                            )
                        )
        elif not partial and not empty:
            out.append(Violation(f"{ipath}.visual_features", "missing for a non-empty mask"))

        if inst.centroid is not None:
            x, y = inst.centroid
            if not (0 <= x < w and 0 <= y < h):
                out.append(Violation(f"{ipath}.centroid", f"({x}, {y}) outside [0,{w})x[0,{h})"))
        elif not partial and not empty:
            out.append(Violation(f"{ipath}.centroid", "missing for a non-empty mask"))
    return out


def validate_sample(
    sample: RVTSample,
    resolution: Optional[tuple[int, int]] = None,
    known_instance_ids: Optional[set[str]] = None,
) -> list[Violation]:
    """Check RVTSample invariants; box bounds only when resolution is given."""
    out: list[Violation] = []
    if not sample.sample_id:
        out.append(Violation("sample_id", "must be non-empty"))
    if sample.level not in (1, 2, 3, 4):
        out.append(Violation("level", f"{sample.level} not in 1..4"))
    if not sample.query:
        out.append(Violation("query", "must be non-empty"))
    if not sample.categories:
        out.append(Violation("categories", "must be non-empty"))
    expected = GROUND_TRUTH_KIND_FOR_TASK[sample.task]
    if sample.ground_truth.kind != expected:
        out.append(
            Violation(
                "ground_truth",
                f"variant {sample.ground_truth.kind!r} does not match task {sample.task.value!r}",
            )
        )
    if known_instance_ids:
        for iid in known_instance_ids:
            if iid and iid in sample.query:
                out.append(Violation("query", f"contains instance id {iid!r}"))
    if isinstance(sample.ground_truth, BoxSequence) and resolution is not None:
        h, w = resolution
        for t, boxes in sorted(sample.ground_truth.frames.items()):
            for b in boxes:
                x, y, bw, bh = b
                if not (x >= 0 and y >= 0 and bw > 0 and bh > 0 and x + bw <= w and y + bh <= h):
                    out.append(Violation(f"ground_truth.frames[{t}]", f"box {b} outside frame"))
    return out


# -- serialization ----------------------------------------------------------

STORAGE_PROFILE = "storage"
PROMPT_PROFILE = "prompt"


def _round2(x: float) -> float:
    return round(float(x), 2)


def _mask_to_json(mask: MaskRLE, profile: str) -> dict[str, Any]:
    if profile == PROMPT_PROFILE:
        # Raw run lengths are useless to a language model; summarize instead.
        bbox = mask_bbox(mask)
        return {"area": mask.area(), "bbox": list(bbox) if bbox else None}
    return {"size": list(mask.size), "counts": list(mask.counts)}


def _instance_to_json(inst: InstanceRecord, profile: str) -> dict[str, Any]:
    rnd = _round2 if profile == PROMPT_PROFILE else float
    d: dict[str, Any] = {
        "mask": _mask_to_json(inst.mask, profile),
        "confidence": rnd(inst.confidence),
        "description": inst.description,
        "depth_stats": None
        if inst.depth_stats is None
        else [rnd(inst.depth_stats.mean), rnd(inst.depth_stats.std)],
        "centroid": None if inst.centroid is None else [rnd(c) for c in inst.centroid],
    }
    vf = inst.visual_features
    d["visual_features"] = (
        None
        if vf is None
        else {
            "color_histogram": [[rnd(v) for v in ch] for ch in vf.color_histogram],
            "motion": [rnd(v) for v in vf.motion],
            "texture": rnd(vf.texture),
        }
    )
    return d


def twin_to_json_obj(twin: DigitalTwin, profile: str = STORAGE_PROFILE) -> dict[str, Any]:
    if profile not in (STORAGE_PROFILE, PROMPT_PROFILE):
        raise ArgumentError(f"unknown serialization profile {profile!r}")
    meta = twin.metadata
    return {
        "metadata": {
            "video_id": meta.video_id,
            "description": meta.description,
            "duration": meta.duration,
            "resolution": list(meta.resolution),
            "fps": meta.fps,
            "source": meta.source,
        },
        "frames": [
            {
                "timestamp": f.timestamp,
                "scene_description": f.scene_description,
                "spatial_description": f.spatial_description,
                "spatial_relations": [r.to_list() for r in f.spatial_relations],
                "propagated": f.propagated,
                "instances": {
                    iid: _instance_to_json(inst, profile)
                    for iid, inst in sorted(f.instances.items())
                },
            }
            for f in twin.frames
        ],
        "keyframe_indices": sorted(twin.keyframe_indices),
    }


def serialize_twin(twin: DigitalTwin, profile: str = STORAGE_PROFILE) -> str:
    """Canonical JSON text (sorted keys). Storage profile must validate clean."""
    if profile == STORAGE_PROFILE:
        bad = errors_only(validate_twin(twin, mode="partial"))
        if bad:
            raise SchemaError(bad[0].path, f"refusing to serialize invalid twin: {bad[0].rule}")
    return json.dumps(twin_to_json_obj(twin, profile), sort_keys=True, separators=(",", ":"))


def _expect(obj: Any, key: str, types: tuple[type, ...], path: str) -> Any:
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{path}.{key}", "missing")
    val = obj[key]
    if not isinstance(val, types) or (bool not in types and isinstance(val, bool)):
        raise SchemaError(f"{path}.{key}", f"expected {'/'.join(t.__name__ for t in types)}")
    return val


def _mask_from_json(obj: Any, path: str, base_dir: Optional[Path]) -> MaskRLE:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected object")
    if "path" in obj:
        if base_dir is None:
            raise SchemaError(path, f"external mask {obj['path']!r} but no base directory given")
        ref = Path(base_dir) / str(obj["path"])
        try:
            obj = json.loads(ref.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(path, f"cannot load external mask {str(ref)!r}: {exc}") from exc
    size = _expect(obj, "size", (list,), path)
    counts = _expect(obj, "counts", (list,), path)
    if len(size) != 2 or not all(isinstance(v, int) for v in size):
        raise SchemaError(f"{path}.size", "expected [H, W] integers")
    if not all(isinstance(c, int) and c >= 0 for c in counts):
        raise SchemaError(f"{path}.counts", "expected non-negative integers")
    return MaskRLE(size=(size[0], size[1]), counts=tuple(counts))


def _instance_from_json(iid: str, obj: Any, path: str, base_dir: Optional[Path]) -> InstanceRecord:
    mask = _mask_from_json(_expect(obj, "mask", (dict,), path), f"{path}.mask", base_dir)
    conf = _expect(obj, "confidence", (int, float), path)
    desc = _expect(obj, "description", (str,), path)
    ds = obj.get("depth_stats")
    depth = None
    if ds is not None:
        if not (isinstance(ds, list) and len(ds) == 2):
            raise SchemaError(f"{path}.depth_stats", "expected [mean, std]")
        depth = DepthStats(mean=float(ds[0]), std=float(ds[1]))
    cen = obj.get("centroid")
    centroid = None if cen is None else (float(cen[0]), float(cen[1]))
    vf_obj = obj.get("visual_features")
    features = None
    if vf_obj is not None:
        hist = _expect(vf_obj, "color_histogram", (list,), f"{path}.visual_features")
        motion = _expect(vf_obj, "motion", (list,), f"{path}.visual_features")
        texture = _expect(vf_obj, "texture", (int, float), f"{path}.visual_features")
        features = VisualFeatures(
            color_histogram=tuple(tuple(float(v) for v in ch) for ch in hist),
            motion=(float(motion[0]), float(motion[1])),
            texture=float(texture),
        )
    return InstanceRecord(
        instance_id=iid,
        mask=mask,
        confidence=float(conf),
        description=desc,
        depth_stats=depth,
        visual_features=features,
        centroid=centroid,
    )


def twin_from_json_obj(obj: Any, base_dir: Optional[Path] = None) -> DigitalTwin:
    meta_obj = _expect(obj, "metadata", (dict,), "$")
    # Field order mirrors the twin layout: the global description leads.
    description = _expect(meta_obj, "description", (str,), "metadata")
    video_id = _expect(meta_obj, "video_id", (str,), "metadata")
    duration = _expect(meta_obj, "duration", (int,), "metadata")
    resolution = _expect(meta_obj, "resolution", (list,), "metadata")
    if len(resolution) != 2:
        raise SchemaError("metadata.resolution", "expected [H, W]")
    meta = VideoMeta(
        video_id=video_id,
        description=description,
        duration=duration,
        resolution=(int(resolution[0]), int(resolution[1])),
        fps=float(_expect(meta_obj, "fps", (int, float), "metadata")),
        source=str(meta_obj.get("source", "")),
    )
    frames_obj = _expect(obj, "frames", (list,), "$")
    frames = []
    for i, f in enumerate(frames_obj):
        path = f"frames[{i}]"
        rels = []
        for r in f.get("spatial_relations", []):
            if not (isinstance(r, list) and len(r) == 3):
                raise SchemaError(f"{path}.spatial_relations", "expected [subject, relation, object]")
            rels.append(SpatialRelation(str(r[0]), str(r[1]), str(r[2])))
        instances_obj = _expect(f, "instances", (dict,), path)
        frames.append(
            FrameRecord(
                timestamp=_expect(f, "timestamp", (int,), path),
                scene_description=_expect(f, "scene_description", (str,), path),
                spatial_description=_expect(f, "spatial_description", (str,), path),
                spatial_relations=tuple(rels),
                propagated=bool(f.get("propagated", False)),
                instances={
                    iid: _instance_from_json(iid, inst, f"{path}.instances[{iid}]", base_dir)
                    for iid, inst in sorted(instances_obj.items())
                },
            )
        )
    keyframes = obj.get("keyframe_indices", [])
    return DigitalTwin(
        metadata=meta, frames=tuple(frames), keyframe_indices=frozenset(int(k) for k in keyframes)
    )


def parse_twin(text: str, base_dir: Optional[Path] = None) -> DigitalTwin:
    """Parse storage-profile JSON; SchemaError names the first failing path."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"malformed JSON: {exc}") from exc
    return twin_from_json_obj(obj, base_dir=base_dir)


# -- twin file layout -------------------------------------------------------


def twin_path(out_dir: Path, video_id: str) -> Path:
    return Path(out_dir) / "twins" / f"{video_id}.json"


def write_twin(twin: DigitalTwin, out_dir: Path, externalize_masks: bool = False) -> Path:
    """Write ``twins/<video_id>.json``; optionally spill masks to ``masks/``.

    External layout stores one JSON file per (instance, frame) under
    ``masks/<video_id>/<instance_id>/<t>.rle`` with the twin holding paths
    relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    obj = twin_to_json_obj(twin, STORAGE_PROFILE)
    bad = errors_only(validate_twin(twin, mode="partial"))
    if bad:
        raise SchemaError(bad[0].path, f"refusing to write invalid twin: {bad[0].rule}")
    vid = twin.metadata.video_id
    if externalize_masks:
        for frame_obj, frame in zip(obj["frames"], twin.frames):
            for iid, inst_obj in frame_obj["instances"].items():
                rel = Path("masks") / vid / iid / f"{frame.timestamp}.rle"
                target = out_dir / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(
                    json.dumps(inst_obj["mask"], sort_keys=True, separators=(",", ":")),
                    encoding="utf-8",
                )
                inst_obj["mask"] = {"path": rel.as_posix()}
    path = twin_path(out_dir, vid)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")), encoding="utf-8")
    return path


def read_twin(path: Path) -> DigitalTwin:
    """Read a twin file; external mask paths resolve against its output root."""
    path = Path(path)
    return parse_twin(path.read_text(encoding="utf-8"), base_dir=path.parent.parent)


# -- downsampling -----------------------------------------------------------


def downsample_twin(twin: DigitalTwin, d: int) -> DigitalTwin:
    """Keep frames at timestamps d, 2d, ..., floor(T/d)*d (1-indexed)."""
    if d < 1:
        raise ArgumentError(f"downsampling interval must be >= 1, got {d}")
    wanted = {d * i for i in range(1, twin.metadata.duration // d + 1)}
    frames = tuple(f for f in twin.frames if f.timestamp in wanted)
    if not frames:
        logger.warning(
            "downsampling %s with d=%d leaves no frames (T=%d)",
            twin.metadata.video_id,
            d,
            twin.metadata.duration,
        )
    kept = {f.timestamp for f in frames}
    return replace(twin, frames=frames, keyframe_indices=frozenset(twin.keyframe_indices & kept))


# -- sample serialization ---------------------------------------------------


def ground_truth_to_json(gt: GroundTruth) -> dict[str, Any]:
    if isinstance(gt, MaskSequence):
        return {
            "kind": "masks",
            "frames": {
                str(t): [_mask_to_json(m, STORAGE_PROFILE) for m in masks]
                for t, masks in sorted(gt.frames.items())
            },
        }
    if isinstance(gt, BoxSequence):
        return {
            "kind": "boxes",
            "frames": {str(t): [list(b) for b in boxes] for t, boxes in sorted(gt.frames.items())},
        }
    return {"kind": "text", "text": gt.text}


def ground_truth_from_json(obj: Any, path: str = "ground_truth") -> GroundTruth:
    kind = _expect(obj, "kind", (str,), path)
    if kind == "text":
        return TextAnswer(text=_expect(obj, "text", (str,), path))
    frames_obj = _expect(obj, "frames", (dict,), path)
    if kind == "masks":
        return MaskSequence(
            frames={
                int(t): tuple(_mask_from_json(m, f"{path}.frames[{t}]", None) for m in masks)
                for t, masks in frames_obj.items()
            }
        )
    if kind == "boxes":
        return BoxSequence(
            frames={
                int(t): tuple((int(b[0]), int(b[1]), int(b[2]), int(b[3])) for b in boxes)
                for t, boxes in frames_obj.items()
            }
        )
    raise SchemaError(f"{path}.kind", f"unknown ground-truth kind {kind!r}")


def sample_to_json_obj(sample: RVTSample) -> dict[str, Any]:
    return {
        "sample_id": sample.sample_id,
        "video_id": sample.video_id,
        "task": sample.task.value,
        "query": sample.query,
        "categories": sorted(c.value for c in sample.categories),
        "level": sample.level,
        "ground_truth": ground_truth_to_json(sample.ground_truth),
        "target_instance_id": sample.target_instance_id,
        "subtree": sample.subtree_ref,
    }


def sample_from_json_obj(obj: Any) -> RVTSample:
    task_raw = _expect(obj, "task", (str,), "$")
    try:
        task = TaskType(task_raw)
    except ValueError as exc:
        raise SchemaError("task", f"unknown task {task_raw!r}") from exc
    cats = _expect(obj, "categories", (list,), "$")
    try:
        categories = frozenset(ReasoningCategory(c) for c in cats)
    except ValueError as exc:
        raise SchemaError("categories", str(exc)) from exc
    return RVTSample(
        sample_id=_expect(obj, "sample_id", (str,), "$"),
        video_id=_expect(obj, "video_id", (str,), "$"),
        task=task,
        query=_expect(obj, "query", (str,), "$"),
        categories=categories,
        level=_expect(obj, "level", (int,), "$"),
        ground_truth=ground_truth_from_json(_expect(obj, "ground_truth", (dict,), "$")),
        target_instance_id=str(obj.get("target_instance_id", "")),
        subtree_ref=dict(obj.get("subtree", {})),
    )
