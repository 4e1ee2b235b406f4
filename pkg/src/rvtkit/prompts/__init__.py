"""Versioned prompt templates.

Templates are plain text with ``$name`` placeholders (string.Template), so
JSON braces inside them never need escaping. Provenance uses content digests
rather than embedded version numbers.
"""

from __future__ import annotations

import hashlib
from importlib import resources
from string import Template

from ..errors import ValidationFailure


def _read(group: str, name: str) -> str:
    ref = resources.files(__package__) / group / f"{name}.txt"
    try:
        return ref.read_text(encoding="utf-8")
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise ValidationFailure(f"unknown prompt template {group}/{name}") from exc


def render(group: str, name: str, **values: str) -> str:
    try:
        return Template(_read(group, name)).substitute(**values)
    except KeyError as exc:
        raise ValidationFailure(f"template {group}/{name} missing value for {exc}") from exc


def template_digest(group: str, name: str) -> str:
    return hashlib.sha256(_read(group, name).encode("utf-8")).hexdigest()


def list_templates() -> dict[str, str]:
    """Digest of every shipped template, keyed by 'group/name'."""
    out: dict[str, str] = {}
    root = resources.files(__package__)
    for group_dir in root.iterdir():
        if not group_dir.is_dir() or group_dir.name == "__pycache__":
            continue
        for entry in group_dir.iterdir():
            if entry.name.endswith(".txt"):
                name = entry.name[: -len(".txt")]
                out[f"{group_dir.name}/{name}"] = template_digest(group_dir.name, name)
    return out
