"""CLI, configuration, video ingestion, and pipeline orchestration."""

from .config import GenerationConfig, MetricConfig, RunConfig, load_config
from .ingest import IngestError, ingest_video
from .manifest import build_manifest, load_manifest, write_manifest
from .cli import main

__all__ = [
    "GenerationConfig",
    "IngestError",
    "MetricConfig",
    "RunConfig",
    "build_manifest",
    "ingest_video",
    "load_config",
    "load_manifest",
    "main",
    "write_manifest",
]
