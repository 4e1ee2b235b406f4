"""Dataset manifest: what was built, from which inputs, with which models."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Sequence

from ..dtcore import SchemaError
from ..errors import ValidationFailure
from ..modelio import canonical_json

MANIFEST_NAME = "manifest.json"


def build_manifest(
    dataset_id: str,
    videos: Sequence[Mapping[str, Any]],
    shards: Sequence[str],
    provenance: Mapping[str, Any],
) -> dict[str, Any]:
    return {
        "dataset_id": dataset_id,
        "videos": sorted(
            (
                {
                    "video_id": str(v["video_id"]),
                    "frames": int(v["frames"]),
                    "resolution": [int(v["resolution"][0]), int(v["resolution"][1])],
                    "checksum": str(v["checksum"]),
                }
                for v in videos
            ),
            key=lambda v: v["video_id"],
        ),
        "shards": sorted(str(s) for s in shards),
        "provenance": dict(provenance),
    }


def write_manifest(out_dir: Path | str, manifest: Mapping[str, Any]) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(manifest) + "\n", encoding="utf-8")
    return path


def load_manifest(out_dir: Path | str) -> dict[str, Any]:
    """Read and cross-check a manifest against the artifacts beside it.

    Every shard listed must exist under the output dir, and every video_id a
    shard mentions must have a manifest entry.
    """
    path = Path(out_dir) / MANIFEST_NAME
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationFailure(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc}") from exc
    for key in ("dataset_id", "videos", "shards", "provenance"):
        if key not in obj:
            raise SchemaError(str(path), f"missing key {key!r}")
    known_ids = set()
    for entry in obj["videos"]:
        if not isinstance(entry, dict) or "video_id" not in entry or "checksum" not in entry:
            raise SchemaError(str(path), "video entries need video_id and checksum")
        known_ids.add(entry["video_id"])
    for rel in obj["shards"]:
        shard_file = Path(out_dir) / rel
        if not shard_file.is_file():
            raise ValidationFailure(f"manifest lists missing shard {rel}")
        for line_no, line in enumerate(shard_file.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                vid = json.loads(line).get("video_id")
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{rel}:{line_no}", f"invalid JSON: {exc}") from exc
            if vid not in known_ids:
                raise ValidationFailure(
                    f"{rel}:{line_no}: video {vid!r} has no manifest entry"
                )
    return obj


def verify_inputs(manifest: Mapping[str, Any], checksums: Mapping[str, str]) -> None:
    """Compare recorded video checksums against freshly computed ones."""
    stale = []
    for entry in manifest["videos"]:
        vid = entry["video_id"]
        current = checksums.get(vid)
        if current is not None and current != entry["checksum"]:
            stale.append(vid)
    if stale:
        raise ValidationFailure(f"video inputs changed since the manifest was written: {sorted(stale)}")
