"""Run configuration.

One YAML file describes a run; command-line flags override individual values.
``${VAR}`` references anywhere in the file are replaced from the environment
before parsing, so secrets stay out of checked-in configs.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from ..dtcore import SchemaError
from ..errors import ValidationFailure
from ..modelio import ClientConfig, SamplingParams, TranscriptMode
from ..perception import PerceptionConfig

ADAPTER_SUITES = ("scripted", "http")

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class GenerationConfig:
    """Benchmark-generation knobs: candidate count, downsampling, model, sampling."""

    model: str = "gpt-4o"
    candidates: int = 2
    downsample: int = 1
    split: str = "val"
    template_set: str = "builtin"
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 1024
    seed: Optional[int] = None

    def sampling_params(self) -> SamplingParams:
        return SamplingParams(
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens,
            seed=self.seed,
        )


@dataclass(frozen=True)
class MetricConfig:
    boundary_tolerance: float = 0.008


@dataclass(frozen=True)
class AdapterEndpoints:
    segment: str = ""
    depth: str = ""
    caption: str = ""


@dataclass(frozen=True)
class RunConfig:
    videos_dir: Path
    out_dir: Path
    adapters: str = "scripted"
    endpoints: AdapterEndpoints = field(default_factory=AdapterEndpoints)
    keyframe_interval: int | str = "auto"
    confidence_floor: float = 0.5
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    transcript_mode: TranscriptMode = TranscriptMode.PASSTHROUGH
    transcript_path: Optional[Path] = None
    workers: int = 1
    api_base: str = ""
    api_key: str = ""

    def perception_config(self) -> PerceptionConfig:
        return PerceptionConfig(
            keyframe_interval=self.keyframe_interval,
            confidence_floor=self.confidence_floor,
            downsample_d=1,  # prompts downsample in benchgen; twins stay dense
        )

    def client_config(self) -> ClientConfig:
        overrides: dict[str, Any] = {"chat_model": self.generation.model}
        if self.api_base:
            overrides["base_url"] = self.api_base
        if self.api_key:
            overrides["api_key"] = self.api_key
        return ClientConfig.from_env(**overrides)

    def to_json_obj(self) -> dict[str, Any]:
        """Everything that identifies a run. The API key is a secret, not an
        identity, so it never enters run ids or manifests."""
        gen = self.generation
        return {
            "videos_dir": str(self.videos_dir),
            "out_dir": str(self.out_dir),
            "adapters": self.adapters,
            "endpoints": {
                "segment": self.endpoints.segment,
                "depth": self.endpoints.depth,
                "caption": self.endpoints.caption,
            },
            "keyframe_interval": self.keyframe_interval,
            "confidence_floor": self.confidence_floor,
            "generation": {
                "model": gen.model,
                "candidates": gen.candidates,
                "downsample": gen.downsample,
                "split": gen.split,
                "template_set": gen.template_set,
                "temperature": gen.temperature,
                "top_p": gen.top_p,
                "max_tokens": gen.max_tokens,
                "seed": gen.seed,
            },
            "metrics": {"boundary_tolerance": self.metrics.boundary_tolerance},
            "transcript_mode": self.transcript_mode.value,
            "transcript_path": str(self.transcript_path) if self.transcript_path else None,
            "workers": self.workers,
            "api_base": self.api_base,
        }


def _interpolate_env(text: str, origin: str) -> str:
    def repl(match: re.Match[str]) -> str:
        name = match.group(1)
        value = os.environ.get(name)
        if value is None:
            raise ValidationFailure(f"{origin}: environment variable {name} is not set")
        return value

    return _ENV_REF.sub(repl, text)


def _expect_mapping(obj: Any, path: str) -> dict[str, Any]:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise SchemaError(path, f"expected a mapping, got {type(obj).__name__}")
    return obj


def _reject_unknown(obj: Mapping[str, Any], known: tuple[str, ...], path: str) -> None:
    strays = sorted(set(obj) - set(known))
    if strays:
        raise SchemaError(path, f"unknown keys {strays}; expected {sorted(known)}")


def _coerce(obj: Mapping[str, Any], key: str, kind: type, default: Any, path: str) -> Any:
    if key not in obj or obj[key] is None:
        return default
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}, got {value!r}")
    return value


def _parse_generation(obj: Mapping[str, Any], path: str) -> GenerationConfig:
    _reject_unknown(
        obj,
        (
            "model",
            "candidates",
            "downsample",
            "split",
            "template_set",
            "temperature",
            "top_p",
            "max_tokens",
            "seed",
        ),
        path,
    )
    base = GenerationConfig()
    seed = obj.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise SchemaError(f"{path}.seed", f"expected integer or null, got {seed!r}")
    return GenerationConfig(
        model=_coerce(obj, "model", str, base.model, path),
        candidates=_coerce(obj, "candidates", int, base.candidates, path),
        downsample=_coerce(obj, "downsample", int, base.downsample, path),
        split=_coerce(obj, "split", str, base.split, path),
        template_set=_coerce(obj, "template_set", str, base.template_set, path),
        temperature=_coerce(obj, "temperature", float, base.temperature, path),
        top_p=_coerce(obj, "top_p", float, base.top_p, path),
        max_tokens=_coerce(obj, "max_tokens", int, base.max_tokens, path),
        seed=seed,
    )


def _validate(cfg: RunConfig) -> RunConfig:
    if not cfg.videos_dir.is_dir():
        raise ValidationFailure(f"videos directory not found: {cfg.videos_dir}")
    if cfg.workers < 1:
        raise ValidationFailure(f"worker count must be >= 1, got {cfg.workers}")
    if cfg.adapters not in ADAPTER_SUITES:
        raise ValidationFailure(
            f"unknown adapter suite {cfg.adapters!r}; expected one of {ADAPTER_SUITES}"
        )
    if cfg.adapters == "http":
        for name in ("segment", "depth", "caption"):
            if not getattr(cfg.endpoints, name):
                raise ValidationFailure(f"adapter suite 'http' needs perception.endpoints.{name}")
    gen = cfg.generation
    if gen.candidates < 1:
        raise ValidationFailure(f"candidate count must be >= 1, got {gen.candidates}")
    if gen.downsample < 1:
        raise ValidationFailure(f"downsample interval must be >= 1, got {gen.downsample}")
    if gen.template_set != "builtin":
        raise ValidationFailure(
            f"unknown template set {gen.template_set!r}; only 'builtin' ships with the package"
        )
    if not gen.split or "/" in gen.split:
        raise ValidationFailure(f"split must be a bare name, got {gen.split!r}")
    if cfg.metrics.boundary_tolerance < 0:
        raise ValidationFailure("boundary tolerance must be non-negative")
    if cfg.transcript_mode is TranscriptMode.REPLAY:
        if cfg.transcript_path is None:
            raise ValidationFailure("transcript mode 'replay' needs a transcript path")
        if not cfg.transcript_path.is_file():
            raise ValidationFailure(f"replay transcript not found: {cfg.transcript_path}")
    cfg.perception_config()  # reuses the perception-side invariant checks
    return cfg


def load_config(path: Path | str, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Parse and validate a run config; ``overrides`` are pre-parsed flag values
    (``out_dir``, ``transcript_path``, ``transcript_mode``, ``workers``)."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ValidationFailure(f"config file not found: {path}") from exc
    try:
        doc = yaml.safe_load(_interpolate_env(raw, str(path)))
    except yaml.YAMLError as exc:
        raise SchemaError(str(path), f"invalid YAML: {exc}") from exc
    doc = _expect_mapping(doc, str(path))
    _reject_unknown(
        doc, ("paths", "perception", "generation", "metrics", "transcript", "workers", "api"), str(path)
    )

    paths = _expect_mapping(doc.get("paths"), f"{path}:paths")
    _reject_unknown(paths, ("videos", "out"), f"{path}:paths")
    for key in ("videos", "out"):
        if not isinstance(paths.get(key), str) or not paths[key]:
            raise SchemaError(f"{path}:paths.{key}", "required path entry is missing")
    base_dir = path.resolve().parent

    def _resolve(value: str) -> Path:
        p = Path(value)
        return p.resolve() if p.is_absolute() else (base_dir / p).resolve()

    perception = _expect_mapping(doc.get("perception"), f"{path}:perception")
    _reject_unknown(
        perception,
        ("adapters", "keyframe_interval", "confidence_floor", "endpoints"),
        f"{path}:perception",
    )
    endpoints_obj = _expect_mapping(perception.get("endpoints"), f"{path}:perception.endpoints")
    _reject_unknown(endpoints_obj, ("segment", "depth", "caption"), f"{path}:perception.endpoints")
    interval = perception.get("keyframe_interval", "auto")
    if interval != "auto" and not isinstance(interval, int):
        raise SchemaError(
            f"{path}:perception.keyframe_interval", f"expected integer or 'auto', got {interval!r}"
        )

    metrics_obj = _expect_mapping(doc.get("metrics"), f"{path}:metrics")
    _reject_unknown(metrics_obj, ("boundary_tolerance",), f"{path}:metrics")

    transcript = _expect_mapping(doc.get("transcript"), f"{path}:transcript")
    _reject_unknown(transcript, ("mode", "path"), f"{path}:transcript")
    mode_raw = transcript.get("mode", TranscriptMode.PASSTHROUGH.value)
    try:
        mode = TranscriptMode(mode_raw)
    except ValueError as exc:
        raise SchemaError(
            f"{path}:transcript.mode",
            f"expected one of {[m.value for m in TranscriptMode]}, got {mode_raw!r}",
        ) from exc
    transcript_path = transcript.get("path")
    if transcript_path is not None and not isinstance(transcript_path, str):
        raise SchemaError(f"{path}:transcript.path", f"expected string, got {transcript_path!r}")

    api = _expect_mapping(doc.get("api"), f"{path}:api")
    _reject_unknown(api, ("base_url", "key"), f"{path}:api")

    cfg = RunConfig(
        videos_dir=_resolve(paths["videos"]),
        out_dir=_resolve(paths["out"]),
        adapters=_coerce(perception, "adapters", str, "scripted", f"{path}:perception"),
        endpoints=AdapterEndpoints(
            segment=_coerce(endpoints_obj, "segment", str, "", f"{path}:perception.endpoints"),
            depth=_coerce(endpoints_obj, "depth", str, "", f"{path}:perception.endpoints"),
            caption=_coerce(endpoints_obj, "caption", str, "", f"{path}:perception.endpoints"),
        ),
        keyframe_interval=interval,
        confidence_floor=_coerce(perception, "confidence_floor", float, 0.5, f"{path}:perception"),
        generation=_parse_generation(
            _expect_mapping(doc.get("generation"), f"{path}:generation"), f"{path}:generation"
        ),
        metrics=MetricConfig(
            boundary_tolerance=_coerce(
                metrics_obj, "boundary_tolerance", float, 0.008, f"{path}:metrics"
            )
        ),
        transcript_mode=mode,
        transcript_path=_resolve(transcript_path) if transcript_path else None,
        workers=_coerce(doc, "workers", int, 1, str(path)),
        api_base=_coerce(api, "base_url", str, "", f"{path}:api"),
        api_key=_coerce(api, "key", str, "", f"{path}:api"),
    )

    if overrides:
        fields: dict[str, Any] = {}
        if overrides.get("out_dir") is not None:
            fields["out_dir"] = Path(overrides["out_dir"]).resolve()
        if overrides.get("transcript_path") is not None:
            fields["transcript_path"] = Path(overrides["transcript_path"]).resolve()
        if overrides.get("transcript_mode") is not None:
            fields["transcript_mode"] = TranscriptMode(overrides["transcript_mode"])
        if overrides.get("workers") is not None:
            fields["workers"] = int(overrides["workers"])
        cfg = replace(cfg, **fields)

    return _validate(cfg)
