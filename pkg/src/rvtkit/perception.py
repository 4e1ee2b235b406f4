"""Digital-twin construction: key-frame perception, tracking propagation,
depth statistics, qualitative spatial descriptions, and classical visual
features."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

import cv2
import numpy as np

from .dtcore import (
    DepthStats,
    DigitalTwin,
    FrameRecord,
    InstanceRecord,
    MaskRLE,
    SpatialRelation,
    VideoMeta,
    VisualFeatures,
    decode_rle,
    encode_rle,
    errors_only,
    parse_twin,
    serialize_twin,
    validate_twin,
)
from .errors import PipelineFault, ValidationFailure

logger = logging.getLogger(__name__)


class PerceptionError(PipelineFault):
    def __init__(self, stage: str, frame: Optional[int], message: str) -> None:
        where = f"{stage}" if frame is None else f"{stage} at frame {frame}"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.frame = frame


class DegenerateMaskError(ValidationFailure):
    pass


class DepthPolarity(str, Enum):
    LARGER_IS_CLOSER = "larger_is_closer"
    SMALLER_IS_CLOSER = "smaller_is_closer"


@dataclass(frozen=True)
class PerceptionConfig:
    keyframe_interval: int | str = "auto"
    confidence_floor: float = 0.5
    same_distance_threshold: float = 10.0
    depth_polarity: DepthPolarity = DepthPolarity.LARGER_IS_CLOSER
    downsample_d: int = 1

    def __post_init__(self) -> None:
        ts = self.keyframe_interval
        if ts != "auto" and (not isinstance(ts, int) or ts < 1):
            raise ValidationFailure(f"keyframe interval must be a positive integer or 'auto', got {ts!r}")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValidationFailure("confidence floor must lie in [0, 1]")
        if self.same_distance_threshold < 0:
            raise ValidationFailure("same-distance threshold must be non-negative")
        if self.downsample_d < 1:
            raise ValidationFailure("downsample interval must be >= 1")


def resolve_keyframe_interval(interval: int | str, duration: int) -> int:
    """'auto' widens the stride with video length, capped to [1, 30]."""
    if interval == "auto":
        return max(1, min(30, duration // 32))
    return int(interval)


def schedule_keyframes(duration: int, interval: int) -> list[int]:
    """Key frames 1, 1+t_s, 1+2*t_s, ... within the video."""
    if duration < 1 or interval < 1:
        raise ValidationFailure(f"need duration >= 1 and interval >= 1, got {duration}, {interval}")
    return list(range(1, duration + 1, interval))


# -- adapter boundary ---------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    track_key: str
    bitmap: np.ndarray
    confidence: float


class SegmenterAdapter(Protocol):
    model_id: str

    def start_video(self, meta: VideoMeta) -> None: ...

    def segment(self, t: int, image: np.ndarray) -> list[Detection]: ...

    def track(self, t: int, image: np.ndarray) -> list[Detection]: ...


class DepthAdapter(Protocol):
    model_id: str

    def depth_map(self, t: int, image: np.ndarray) -> np.ndarray: ...


class CaptionAdapter(Protocol):
    model_id: str

    def describe_instance(self, t: int, image: np.ndarray, bitmap: np.ndarray) -> str: ...

    def describe_scene(self, t: int, image: np.ndarray) -> str: ...

    def describe_video(self, images: Sequence[np.ndarray], timestamps: Sequence[int]) -> str: ...


class FeatureAdapter(Protocol):
    model_id: str

    def extract(
        self, image: np.ndarray, bitmap: np.ndarray, previous: Optional[np.ndarray]
    ) -> VisualFeatures: ...


@dataclass(frozen=True)
class AdapterSet:
    segmenter: SegmenterAdapter
    depth_estimator: DepthAdapter
    captioner: CaptionAdapter
    feature_extractor: FeatureAdapter

    def model_ids(self) -> dict[str, str]:
        return {
            "segmenter": self.segmenter.model_id,
            "depth_estimator": self.depth_estimator.model_id,
            "captioner": self.captioner.model_id,
            "feature_extractor": self.feature_extractor.model_id,
        }


class FrameSource(Protocol):
    """Ordered access to decoded frames; timestamps are 1-indexed."""

    meta: VideoMeta

    def frame(self, t: int) -> np.ndarray: ...


# -- per-concept computations -------------------------------------------------


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Bring a raw depth map onto the 0-255 scale used by all thresholds."""
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if lo >= 0.0 and hi <= 255.0:
        return d
    if hi == lo:
        return np.zeros_like(d)
    return (d - lo) * (255.0 / (hi - lo))


def compute_depth_stats(depth: np.ndarray, bitmap: np.ndarray) -> DepthStats:
    """Population mean/std of depth over mask pixels.

    Sums use exactly-rounded accumulation, so any correct reimplementation
    agrees bit-for-bit, whatever its summation order.
    """
    sel = np.asarray(depth, dtype=np.float64)[np.asarray(bitmap) != 0]
    if sel.size == 0:
        raise DegenerateMaskError("depth statistics need a non-empty mask")
    n = sel.size
    mean = math.fsum(sel) / n
    var = math.fsum((v - mean) ** 2 for v in sel.tolist()) / n
    return DepthStats(mean=mean, std=math.sqrt(var))


_HIST_BINS = np.arange(0, 257, 32)


def extract_visual_features(
    image: np.ndarray, bitmap: np.ndarray, previous: Optional[np.ndarray] = None
) -> VisualFeatures:
    """3x8 color histogram + mean Farneback flow + gradient-energy texture."""
    mask = np.asarray(bitmap) != 0
    if not mask.any():
        raise DegenerateMaskError("visual features need a non-empty mask")
    img = np.asarray(image)
    channels = []
    for c in range(3):
        hist, _ = np.histogram(img[..., c][mask], bins=_HIST_BINS)
        channels.append(tuple((hist / hist.sum()).tolist()))

    if previous is None:
        motion = (0.0, 0.0)
    else:
        g0 = cv2.cvtColor(np.asarray(previous), cv2.COLOR_RGB2GRAY)
        g1 = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
        flow = cv2.calcOpticalFlowFarneback(
            g0, g1, None, pyr_scale=0.5, levels=3, winsize=15, iterations=3,
            poly_n=5, poly_sigma=1.2, flags=0,
        )
        mean = flow[mask].mean(axis=0)
        motion = (float(mean[0]), float(mean[1]))

    gray = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY).astype(np.float64)
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
    texture = float(np.sqrt(gx * gx + gy * gy)[mask].mean() / 255.0)
    return VisualFeatures(color_histogram=tuple(channels), motion=motion, texture=texture)


class ClassicalFeatureExtractor:
    model_id = "classical-hist-flow-sobel"

    def extract(
        self, image: np.ndarray, bitmap: np.ndarray, previous: Optional[np.ndarray]
    ) -> VisualFeatures:
        return extract_visual_features(image, bitmap, previous)


def centroid_of(bitmap: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(np.asarray(bitmap))
    if xs.size == 0:
        raise DegenerateMaskError("centroid needs a non-empty mask")
    return (float(xs.mean()), float(ys.mean()))


# -- spatial descriptions -------------------------------------------------------

_NEXT_TO_DIAGONAL_FRACTION = 0.15


def _depth_relation(
    a: InstanceRecord, b: InstanceRecord, threshold: float, polarity: DepthPolarity
) -> SpatialRelation:
    mu_a, mu_b = a.depth_stats.mean, b.depth_stats.mean
    if abs(mu_a - mu_b) <= threshold:
        return SpatialRelation(a.instance_id, "same_distance", b.instance_id)
    a_closer = mu_a > mu_b if polarity is DepthPolarity.LARGER_IS_CLOSER else mu_a < mu_b
    if a_closer:
        return SpatialRelation(a.instance_id, "in_front", b.instance_id)
    return SpatialRelation(b.instance_id, "in_front", a.instance_id)


def _planar_relation(
    a: InstanceRecord, b: InstanceRecord, resolution: tuple[int, int], same_distance: bool
) -> SpatialRelation:
    h, w = resolution
    ax, ay = a.centroid
    bx, by = b.centroid
    dist = math.hypot(ax - bx, ay - by)
    if same_distance and dist < _NEXT_TO_DIAGONAL_FRACTION * math.hypot(h, w):
        return SpatialRelation(a.instance_id, "next_to", b.instance_id)
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy):
        side = "left_of" if dx > 0 else "right_of"
    else:
        side = "above" if dy > 0 else "below"
    return SpatialRelation(a.instance_id, side, b.instance_id)


def _qualitative_name(inst: InstanceRecord) -> str:
    # The rendered text must stay digit-free; ids and counted phrases leak digits.
    desc = inst.description.strip()
    if desc and not any(ch.isdigit() for ch in desc):
        return desc
    return "another object"


def _render_spatial_text(
    instances: dict[str, InstanceRecord],
    relations: Sequence[SpatialRelation],
    resolution: tuple[int, int],
) -> str:
    wording = {
        "same_distance": "is about the same distance away as",
        "in_front": "is in front of",
        "left_of": "is to the left of",
        "right_of": "is to the right of",
        "above": "is above",
        "below": "is below",
        "next_to": "is next to",
    }
    clauses = [
        f"{_qualitative_name(instances[r.subject])} {wording[r.relation]} "
        f"{_qualitative_name(instances[r.object])}"
        for r in relations
    ]
    return "; ".join(clauses) + "." if clauses else ""


def _frame_third_text(inst: InstanceRecord, resolution: tuple[int, int]) -> str:
    _, w = resolution
    x = inst.centroid[0]
    third = "left" if x < w / 3 else ("center" if x < 2 * w / 3 else "right")
    return f"{_qualitative_name(inst)} sits in the {third} third of the frame."


def derive_spatial_description(
    instances: dict[str, InstanceRecord],
    resolution: tuple[int, int],
    threshold: float = 10.0,
    polarity: DepthPolarity = DepthPolarity.LARGER_IS_CLOSER,
) -> tuple[str, tuple[SpatialRelation, ...]]:
    """Qualitative relations for every instance pair, plus digit-free text.

    Instances with empty masks are skipped; the remainder must carry depth
    stats and centroids.
    """
    placed = {iid: inst for iid, inst in instances.items() if not inst.mask.is_empty()}
    for iid, inst in placed.items():
        if inst.depth_stats is None or inst.centroid is None:
            raise PerceptionError("spatial", None, f"instance {iid} lacks depth stats or centroid")
    if not placed:
        return ("", ())
    ordered = [placed[iid] for iid in sorted(placed)]
    if len(ordered) == 1:
        return (_frame_third_text(ordered[0], resolution), ())
    relations: list[SpatialRelation] = []
    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            depth_rel = _depth_relation(a, b, threshold, polarity)
            relations.append(depth_rel)
            relations.append(
                _planar_relation(a, b, resolution, depth_rel.relation == "same_distance")
            )
    text = _render_spatial_text(placed, relations, resolution)
    if any(ch.isdigit() for ch in text):  # guaranteed digit-free output
        text = "".join(ch for ch in text if not ch.isdigit())
    return (text, tuple(relations))


# -- twin construction ----------------------------------------------------------


def _captioned(caption_fn, *args: Any) -> str:
    """Adapters occasionally return empty text; retry once, then placeholder."""
    text = caption_fn(*args)
    if not text or not text.strip():
        text = caption_fn(*args)
    if not text or not text.strip():
        logger.warning("captioner returned empty text twice; using placeholder")
        return "unidentified object"
    return text


@dataclass
class _TrackState:
    id_by_key: dict[str, str]
    order: int = 0

    def instance_id(self, track_key: str) -> str:
        if track_key not in self.id_by_key:
            self.order += 1
            self.id_by_key[track_key] = f"obj_{self.order:03d}"
        return self.id_by_key[track_key]


def build_digital_twin(
    source: FrameSource,
    config: PerceptionConfig,
    adapters: AdapterSet,
    partial_path: Optional[Path] = None,
) -> DigitalTwin:
    """Run the full perception pipeline over one video.

    Key frames get detection + captions; frames in between get tracked masks
    with captions copied forward, while depth stats, features, centroids, and
    spatial text are recomputed from that frame's own pixels. When
    ``partial_path`` is set, progress is persisted there after every frame and
    an interrupted build resumes from the last completed key-frame segment.
    """
    meta = source.meta
    interval = resolve_keyframe_interval(config.keyframe_interval, meta.duration)
    keyframes = schedule_keyframes(meta.duration, interval)
    frames: list[FrameRecord] = []
    state = _TrackState(id_by_key={})
    start_t = 1

    if partial_path is not None and Path(partial_path).is_file():
        frames, state, start_t = _load_partial(Path(partial_path), keyframes)
        logger.info("resuming %s from frame %d", meta.video_id, start_t)

    adapters.segmenter.start_video(meta)
    active_keys: list[str] = []
    descriptions: dict[str, str] = {}
    scene_text = ""
    # Replaying frames before start_t rebuilds tracker identity and captions.
    replay_until = start_t - 1

    for t in range(1, meta.duration + 1):
        is_key = t in keyframes
        if t <= replay_until:
            if is_key:
                detections = _segment(adapters, t, source.frame(t), config)
                active_keys = [d.track_key for d in detections]
                for d in detections:
                    state.instance_id(d.track_key)
                prior = frames[t - 1]
                scene_text = prior.scene_description
                descriptions = {iid: inst.description for iid, inst in prior.instances.items()}
            continue

        image = source.frame(t)
        previous = source.frame(t - 1) if t > 1 else None
        if is_key:
            detections = _segment(adapters, t, image, config)
            active_keys = [d.track_key for d in detections]
        else:
            tracked = {d.track_key: d for d in _track(adapters, t, image)}
            detections = []
            h, w = meta.resolution
            for key in active_keys:
                d = tracked.get(key)
                if d is None:  # vanished mid-interval: keep the id, empty mask
                    d = Detection(key, np.zeros((h, w), dtype=np.uint8), 0.0)
                detections.append(d)

        depth = None
        if any(np.asarray(d.bitmap).any() for d in detections):
            depth = normalize_depth(_stage(adapters.depth_estimator.depth_map, "depth", t, t, image))

        instances: dict[str, InstanceRecord] = {}
        for d in detections:
            iid = state.instance_id(d.track_key)
            bitmap = np.asarray(d.bitmap)
            nonempty = bool(bitmap.any())
            if is_key and nonempty:
                descriptions[iid] = _stage(
                    _captioned, "captioner", t, adapters.captioner.describe_instance, t, image, bitmap
                )
            description = descriptions.get(iid, "unidentified object")
            if nonempty:
                instances[iid] = InstanceRecord(
                    instance_id=iid,
                    mask=encode_rle(bitmap),
                    confidence=float(d.confidence),
                    description=description,
                    depth_stats=compute_depth_stats(depth, bitmap),
                    visual_features=_stage(
                        adapters.feature_extractor.extract, "features", t, image, bitmap, previous
                    ),
                    centroid=centroid_of(bitmap),
                )
            else:
                instances[iid] = InstanceRecord(
                    instance_id=iid,
                    mask=encode_rle(bitmap) if bitmap.size else encode_rle(
                        np.zeros(meta.resolution, dtype=np.uint8)
                    ),
                    confidence=float(d.confidence),
                    description=description,
                )

        if is_key:
            scene_text = _stage(
                _captioned, "captioner", t, adapters.captioner.describe_scene, t, image
            )
        spatial_text, relations = derive_spatial_description(
            instances, meta.resolution, config.same_distance_threshold, config.depth_polarity
        )
        frames.append(
            FrameRecord(
                timestamp=t,
                scene_description=scene_text,
                spatial_description=spatial_text,
                spatial_relations=relations,
                instances=instances,
                propagated=not is_key,
            )
        )
        if partial_path is not None:
            _persist_partial(Path(partial_path), meta, frames, keyframes)

    key_images = [source.frame(t) for t in keyframes]
    global_text = _stage(
        _captioned, "captioner", None, adapters.captioner.describe_video, key_images, keyframes
    )
    twin = DigitalTwin(
        metadata=dataclasses.replace(meta, description=global_text),
        frames=tuple(frames),
        keyframe_indices=frozenset(keyframes),
    )
    bad = errors_only(validate_twin(twin))
    if bad:
        raise PerceptionError("validate", None, f"built twin is invalid: {bad[0]}")
    if partial_path is not None and Path(partial_path).is_file():
        Path(partial_path).unlink()
    return twin


def _segment(
    adapters: AdapterSet, t: int, image: np.ndarray, config: PerceptionConfig
) -> list[Detection]:
    detections = _stage(adapters.segmenter.segment, "segment", t, t, image)
    return [d for d in detections if d.confidence >= config.confidence_floor]


def _track(adapters: AdapterSet, t: int, image: np.ndarray) -> list[Detection]:
    return _stage(adapters.segmenter.track, "track", t, t, image)


def _stage(fn, stage: str, frame: Optional[int], *args: Any):
    try:
        return fn(*args)
    except (PipelineFault, ValidationFailure):
        raise
    except Exception as exc:  # adapter bugs become located pipeline faults
        raise PerceptionError(stage, frame, str(exc)) from exc


def _persist_partial(
    path: Path, meta: VideoMeta, frames: list[FrameRecord], keyframes: list[int]
) -> None:
    done = {f.timestamp for f in frames}
    snapshot = DigitalTwin(
        metadata=meta,
        frames=tuple(frames),
        keyframe_indices=frozenset(k for k in keyframes if k in done),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_twin(snapshot), encoding="utf-8")


def _load_partial(path: Path, keyframes: list[int]) -> tuple[list[FrameRecord], _TrackState, int]:
    twin = parse_twin(path.read_text(encoding="utf-8"))
    frames = list(twin.frames)
    # Restart at the key frame owning the first missing timestamp so tracker
    # state is rebuilt from a detection pass; that segment's frames are
    # recomputed. Identity assignments are replayed from the key frames before
    # it, so the state starts empty here.
    next_t = len(frames) + 1
    segment_start = max((k for k in keyframes if k <= next_t), default=1)
    return frames[: segment_start - 1], _TrackState(id_by_key={}), segment_start


# -- HTTP adapters ----------------------------------------------------------------
#
# Thin JSON-over-HTTP clients for self-hosted inference services. Protocol:
# POST <base>/segment {"image": b64 png, "frame": t, "mode": "detect"|"track"}
#   -> {"detections": [{"track": str, "mask": {"size", "counts"}, "confidence": f}]}
# POST <base>/depth {"image": b64} -> {"depth": [[...]]}
# POST <base>/caption {"image": b64, "mask": {...}?, "kind": ...} -> {"text": str}


def _png_b64(image: np.ndarray) -> str:
    import base64

    ok, buf = cv2.imencode(".png", cv2.cvtColor(np.asarray(image), cv2.COLOR_RGB2BGR))
    if not ok:
        raise PerceptionError("encode", None, "PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode("ascii")


class _HttpAdapterBase:
    def __init__(self, base_url: str, model_id: str, timeout: float = 120.0) -> None:
        import requests

        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.timeout = timeout
        self._session = requests.Session()

    def _post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        import requests

        try:
            resp = self._session.post(self.base_url + route, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise PerceptionError("http", payload.get("frame"), str(exc)) from exc
        if resp.status_code != 200:
            raise PerceptionError("http", payload.get("frame"), f"status {resp.status_code}")
        return resp.json()


class HttpSegmenter(_HttpAdapterBase):
    def start_video(self, meta: VideoMeta) -> None:
        self._post("/segment/reset", {"video_id": meta.video_id})

    def _call(self, t: int, image: np.ndarray, mode: str) -> list[Detection]:
        raw = self._post("/segment", {"image": _png_b64(image), "frame": t, "mode": mode})
        out = []
        for d in raw.get("detections", []):
            mask = MaskRLE(size=tuple(d["mask"]["size"]), counts=tuple(d["mask"]["counts"]))
            out.append(Detection(str(d["track"]), decode_rle(mask), float(d["confidence"])))
        return out

    def segment(self, t: int, image: np.ndarray) -> list[Detection]:
        return self._call(t, image, "detect")

    def track(self, t: int, image: np.ndarray) -> list[Detection]:
        return self._call(t, image, "track")


class HttpDepthEstimator(_HttpAdapterBase):
    def depth_map(self, t: int, image: np.ndarray) -> np.ndarray:
        raw = self._post("/depth", {"image": _png_b64(image), "frame": t})
        return np.asarray(raw["depth"], dtype=np.float64)


class HttpCaptioner(_HttpAdapterBase):
    def _caption(self, payload: dict[str, Any]) -> str:
        return str(self._post("/caption", payload).get("text", ""))

    def describe_instance(self, t: int, image: np.ndarray, bitmap: np.ndarray) -> str:
        from .dtcore import encode_rle as _enc

        rle = _enc(bitmap)
        return self._caption(
            {
                "image": _png_b64(image),
                "frame": t,
                "kind": "instance",
                "mask": {"size": list(rle.size), "counts": list(rle.counts)},
            }
        )

    def describe_scene(self, t: int, image: np.ndarray) -> str:
        return self._caption({"image": _png_b64(image), "frame": t, "kind": "scene"})

    def describe_video(self, images: Sequence[np.ndarray], timestamps: Sequence[int]) -> str:
        return self._caption(
            {"images": [_png_b64(im) for im in images], "frames": list(timestamps), "kind": "video"}
        )
