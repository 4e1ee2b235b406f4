"""Video ingestion: numbered frame directories and container files.

Both forms yield the same thing — an ordered, 1-indexed frame accessor with a
``VideoMeta`` and a content checksum, ready for the perception pipeline.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..dtcore import VideoMeta
from ..errors import ValidationFailure

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

_TRAILING_NUMBER = re.compile(r"(\d+)\D*$")


class IngestError(ValidationFailure):
    """The video on disk cannot be turned into a usable frame sequence."""


def _frame_number(path: Path) -> int:
    match = _TRAILING_NUMBER.search(path.stem)
    if match is None:
        raise IngestError(f"{path.name}: frame files must carry a number in the name")
    return int(match.group(1))


@dataclass(frozen=True)
class FrameDirSource:
    """Lazy accessor over a directory of numbered images."""

    meta: VideoMeta
    checksum: str
    paths: tuple[Path, ...]

    def frame(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.paths):
            raise ValidationFailure(f"frame {t} outside [1, {len(self.paths)}]")
        path = self.paths[t - 1]
        try:
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestError(f"frame {t} ({path.name}) unreadable: {exc}") from exc


@dataclass(frozen=True)
class ContainerSource:
    """Fully decoded container file (everything held in memory)."""

    meta: VideoMeta
    checksum: str
    frames_data: tuple[np.ndarray, ...]

    def frame(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self.frames_data):
            raise ValidationFailure(f"frame {t} outside [1, {len(self.frames_data)}]")
        return self.frames_data[t - 1]


def _ingest_directory(path: Path) -> FrameDirSource:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestError(f"{path}: no frame images found (expected {'/'.join(IMAGE_SUFFIXES)})")
    numbered = sorted((_frame_number(p), p) for p in files)
    for (na, pa), (nb, pb) in zip(numbered, numbered[1:]):
        if na == nb:
            raise IngestError(f"{path}: frames {pa.name} and {pb.name} share number {na}")

    digest = hashlib.sha256()
    resolution: tuple[int, int] | None = None
    for index, (_, p) in enumerate(numbered, start=1):
        data = p.read_bytes()
        digest.update(data)
        try:
            with Image.open(p) as img:
                size = (img.height, img.width)
        except (OSError, UnidentifiedImageError) as exc:
            raise IngestError(f"frame {index} ({p.name}) unreadable: {exc}") from exc
        if resolution is None:
            resolution = size
        elif size != resolution:
            raise IngestError(
                f"frame {index} ({p.name}) is {size[0]}x{size[1]} "
                f"but the video started at {resolution[0]}x{resolution[1]}"
            )

    assert resolution is not None
    meta = VideoMeta(
        video_id=path.name,
        description="",
        duration=len(numbered),
        resolution=resolution,
        source=str(path),
    )
    return FrameDirSource(meta=meta, checksum=digest.hexdigest(), paths=tuple(p for _, p in numbered))


def _ingest_container(path: Path) -> ContainerSource:
    import cv2

    capture = cv2.VideoCapture(str(path))
    try:
        fps = float(capture.get(cv2.CAP_PROP_FPS)) or 30.0
        frames: list[np.ndarray] = []
        while True:
            ok, bgr = capture.read()
            if not ok:
                break
            frames.append(np.ascontiguousarray(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)))
    finally:
        capture.release()
    if not frames:
        raise IngestError(f"{path}: no decodable frames in container")
    resolution = frames[0].shape[:2]
    for index, frame in enumerate(frames, start=1):
        if frame.shape[:2] != resolution:
            raise IngestError(f"frame {index}: container resolution changed mid-stream")
    meta = VideoMeta(
        video_id=path.stem,
        description="",
        duration=len(frames),
        resolution=(int(resolution[0]), int(resolution[1])),
        fps=fps,
        source=str(path),
    )
    checksum = hashlib.sha256(path.read_bytes()).hexdigest()
    return ContainerSource(meta=meta, checksum=checksum, frames_data=tuple(frames))


def ingest_video(path: Path | str) -> FrameDirSource | ContainerSource:
    """Frame accessor + metadata for a frame directory or a container file."""
    path = Path(path)
    if path.is_dir():
        return _ingest_directory(path)
    if path.is_file():
        return _ingest_container(path)
    raise IngestError(f"video path not found: {path}")
