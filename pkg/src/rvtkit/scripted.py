"""Script-driven synthetic videos and the perception adapters that "see" them.

A scene script declares colored rectangles with motion, depth, and captions.
From one script we can render frames to PNGs, serve them as a frame source,
and run fixture-backed segmenter/depth/captioner adapters whose outputs are
known analytically — the offline counterpart to live inference services.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import cv2
import numpy as np

from .dtcore import VideoMeta
from .errors import ValidationFailure
from .perception import AdapterSet, ClassicalFeatureExtractor, Detection


@dataclass(frozen=True)
class SpriteSpec:
    name: str
    description: str
    color: tuple[int, int, int]
    size: tuple[int, int]  # (w, h)
    start: tuple[int, int]  # top-left (x, y) at the appear frame
    velocity: tuple[float, float] = (0.0, 0.0)
    depth: float = 120.0
    depth_velocity: float = 0.0
    appear: int = 1
    vanish: Optional[int] = None  # last visible frame, inclusive
    confidence: float = 0.9
    textured: bool = True


@dataclass(frozen=True)
class SceneScript:
    video_id: str
    duration: int
    resolution: tuple[int, int]  # (H, W)
    instances: tuple[SpriteSpec, ...]
    fps: float = 10.0
    scene: str = "a plain synthetic room"
    video_description: str = "synthetic sprites moving on a plain background"
    background_color: tuple[int, int, int] = (40, 40, 40)
    background_depth: float = 30.0

    def meta(self) -> VideoMeta:
        return VideoMeta(
            video_id=self.video_id,
            description="",
            duration=self.duration,
            resolution=self.resolution,
            fps=self.fps,
            source="scripted",
        )


def load_scene(source: Path | str | dict[str, Any]) -> SceneScript:
    if isinstance(source, (str, Path)):
        obj = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        obj = source
    try:
        sprites = tuple(
            SpriteSpec(
                name=s["name"],
                description=s["description"],
                color=tuple(s.get("color", (200, 60, 60))),
                size=tuple(s["size"]),
                start=tuple(s["start"]),
                velocity=tuple(s.get("velocity", (0.0, 0.0))),
                depth=float(s.get("depth", 120.0)),
                depth_velocity=float(s.get("depth_velocity", 0.0)),
                appear=int(s.get("appear", 1)),
                vanish=s.get("vanish"),
                confidence=float(s.get("confidence", 0.9)),
                textured=bool(s.get("textured", True)),
            )
            for s in obj["instances"]
        )
        return SceneScript(
            video_id=obj["video_id"],
            duration=int(obj["duration"]),
            resolution=(int(obj["resolution"][0]), int(obj["resolution"][1])),
            instances=sprites,
            fps=float(obj.get("fps", 10.0)),
            scene=obj.get("scene", "a plain synthetic room"),
            video_description=obj.get(
                "video_description", "synthetic sprites moving on a plain background"
            ),
            background_color=tuple(obj.get("background_color", (40, 40, 40))),
            background_depth=float(obj.get("background_depth", 30.0)),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationFailure(f"bad scene script: {exc}") from exc


def sprite_rect(script: SceneScript, spec: SpriteSpec, t: int) -> Optional[tuple[int, int, int, int]]:
    """Clipped (x0, y0, w, h) of a sprite at frame t, or None when invisible."""
    last = spec.vanish if spec.vanish is not None else script.duration
    if not spec.appear <= t <= last:
        return None
    steps = t - spec.appear
    x = int(round(spec.start[0] + spec.velocity[0] * steps))
    y = int(round(spec.start[1] + spec.velocity[1] * steps))
    h, w = script.resolution
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + spec.size[0], w), min(y + spec.size[1], h)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def sprite_depth(spec: SpriteSpec, t: int) -> float:
    return float(np.clip(spec.depth + spec.depth_velocity * (t - spec.appear), 0.0, 255.0))


def sprite_bitmap(script: SceneScript, spec: SpriteSpec, t: int) -> np.ndarray:
    bitmap = np.zeros(script.resolution, dtype=np.uint8)
    rect = sprite_rect(script, spec, t)
    if rect is not None:
        x0, y0, rw, rh = rect
        bitmap[y0 : y0 + rh, x0 : x0 + rw] = 1
    return bitmap


def render_frame(script: SceneScript, t: int) -> np.ndarray:
    """RGB uint8 frame; textured sprites carry an object-anchored checker."""
    h, w = script.resolution
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = script.background_color
    for spec in script.instances:
        rect = sprite_rect(script, spec, t)
        if rect is None:
            continue
        x0, y0, rw, rh = rect
        patch = np.empty((rh, rw, 3), dtype=np.int16)
        patch[:] = spec.color
        if spec.textured:
            yy, xx = np.mgrid[0:rh, 0:rw]
            checker = ((xx + yy) % 2) * 80 - 40
            patch += checker[..., None]
        img[y0 : y0 + rh, x0 : x0 + rw] = np.clip(patch, 0, 255).astype(np.uint8)
    return img


def write_frames(script: SceneScript, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(1, script.duration + 1):
        path = out_dir / f"{t:05d}.png"
        bgr = cv2.cvtColor(render_frame(script, t), cv2.COLOR_RGB2BGR)
        if not cv2.imwrite(str(path), bgr):
            raise ValidationFailure(f"cannot write frame image {path}")
        paths.append(path)
    return paths


class ScriptedFrameSource:
    """Frame source that renders the script on demand."""

    def __init__(self, script: SceneScript) -> None:
        self.script = script
        self.meta = script.meta()

    def frame(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.script.duration:
            raise ValidationFailure(f"frame {t} outside [1, {self.script.duration}]")
        return render_frame(self.script, t)


class ScriptedSegmenter:
    """Detects exactly the scripted sprites; track keys are sprite names."""

    model_id = "scripted-segmenter"

    def __init__(self, script: SceneScript) -> None:
        self.script = script
        self.segment_calls: list[int] = []
        self.track_calls: list[int] = []

    def start_video(self, meta: VideoMeta) -> None:
        pass

    def _visible(self, t: int) -> list[Detection]:
        out = []
        for spec in self.script.instances:
            bitmap = sprite_bitmap(self.script, spec, t)
            if bitmap.any():
                out.append(Detection(spec.name, bitmap, spec.confidence))
        return out

    def segment(self, t: int, image: np.ndarray) -> list[Detection]:
        self.segment_calls.append(t)
        return self._visible(t)

    def track(self, t: int, image: np.ndarray) -> list[Detection]:
        self.track_calls.append(t)
        return self._visible(t)


class ScriptedDepthEstimator:
    model_id = "scripted-depth"

    def __init__(self, script: SceneScript) -> None:
        self.script = script

    def depth_map(self, t: int, image: np.ndarray) -> np.ndarray:
        depth = np.full(self.script.resolution, self.script.background_depth, dtype=np.float64)
        for spec in self.script.instances:
            rect = sprite_rect(self.script, spec, t)
            if rect is None:
                continue
            x0, y0, rw, rh = rect
            depth[y0 : y0 + rh, x0 : x0 + rw] = sprite_depth(spec, t)
        return depth


class ScriptedCaptioner:
    model_id = "scripted-captioner"

    def __init__(self, script: SceneScript) -> None:
        self.script = script
        self.video_calls: list[list[int]] = []

    def describe_instance(self, t: int, image: np.ndarray, bitmap: np.ndarray) -> str:
        target = np.asarray(bitmap) != 0
        best, best_iou = "", 0.0
        for spec in self.script.instances:
            ours = sprite_bitmap(self.script, spec, t) != 0
            inter = float(np.logical_and(target, ours).sum())
            union = float(np.logical_or(target, ours).sum())
            iou = inter / union if union else 0.0
            if iou > best_iou:
                best, best_iou = spec.description, iou
        return best if best_iou > 0.5 else ""

    def describe_scene(self, t: int, image: np.ndarray) -> str:
        return self.script.scene

    def describe_video(self, images: Sequence[np.ndarray], timestamps: Sequence[int]) -> str:
        self.video_calls.append(list(timestamps))
        return self.video_description()

    def video_description(self) -> str:
        return self.script.video_description


def scripted_adapters(script: SceneScript) -> AdapterSet:
    return AdapterSet(
        segmenter=ScriptedSegmenter(script),
        depth_estimator=ScriptedDepthEstimator(script),
        captioner=ScriptedCaptioner(script),
        feature_extractor=ClassicalFeatureExtractor(),
    )
