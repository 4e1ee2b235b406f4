"""``rvt``: build twins, generate benchmarks, evaluate, answer, report.

Every command validates its inputs before any work starts, writes artifacts
only under the configured output dir, and prints a one-line summary. Exit
codes: 0 success, 1 bad inputs, 2 pipeline fault.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .. import prompts
from ..agent import build_task_twin, execute, plan, plan_to_json_obj
from ..benchgen import (
    assemble_samples,
    compute_dataset_stats,
    format_stats_table,
    load_shard,
    shard_path,
    write_shard,
)
from ..dtcore import ground_truth_to_json, write_twin
from ..errors import PipelineFault, ValidationFailure
from ..metrics.report import (
    ClientEmbedder,
    evaluate_run,
    format_report_table,
    read_predictions,
)
from ..modelio import ModelClient, Transcript, TranscriptMode, canonical_json
from ..perception import (
    AdapterSet,
    ClassicalFeatureExtractor,
    HttpCaptioner,
    HttpDepthEstimator,
    HttpSegmenter,
    build_digital_twin,
)
from ..scripted import ScriptedFrameSource, load_scene, scripted_adapters
from ..treegen import select_objects
from .config import RunConfig, load_config
from .ingest import ingest_video
from .manifest import build_manifest, write_manifest

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """Usage mistakes are input validation failures, so they exit 1, not 2."""

    def error(self, message: str) -> Any:  # noqa: D401 - argparse hook
        raise ValidationFailure(f"usage: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (YAML)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--transcript", help="model-call transcript path")
    common.add_argument(
        "--mode",
        choices=[m.value for m in TranscriptMode],
        help="transcript handling: record, replay, or passthrough",
    )
    common.add_argument("--workers", type=int, help="worker pool size")
    common.add_argument(
        "--dry-run", action="store_true", help="validate inputs and stop before any writes"
    )

    parser = _Parser(prog="rvt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("build-dt", parents=[common], help="build digital twins for every video")
    sub.add_parser("gen-bench", parents=[common], help="generate a benchmark shard")

    eval_cmd = sub.add_parser("eval", parents=[common], help="score predictions against a shard")
    eval_cmd.add_argument("--predictions", required=True, help="predictions JSONL")
    eval_cmd.add_argument("--shard", help="shard to score against (default: the configured split)")

    agent_cmd = sub.add_parser("agent", parents=[common], help="answer one query over one video")
    agent_cmd.add_argument("--query", required=True, help="the task query")
    agent_cmd.add_argument("--video", required=True, help="video id to run against")

    stats_cmd = sub.add_parser("stats", parents=[common], help="dataset composition report")
    stats_cmd.add_argument(
        "--shard", action="append", help="shard file (repeatable; default: all built shards)"
    )

    sub.add_parser(
        "replay", parents=[common], help="re-run benchmark generation from a recorded transcript"
    )
    return parser


# -- video discovery ---------------------------------------------------------------


@dataclass(frozen=True)
class VideoInput:
    video_id: str
    path: Path
    checksum: str
    frame_count: int
    resolution: tuple[int, int]
    script: Any = None
    source: Any = None


def _discover_videos(cfg: RunConfig) -> list[VideoInput]:
    if not cfg.videos_dir.is_dir():
        raise ValidationFailure(f"videos directory not found: {cfg.videos_dir}")
    found: list[VideoInput] = []
    if cfg.adapters == "scripted":
        for path in sorted(cfg.videos_dir.glob("*.json")):
            script = load_scene(path)
            found.append(
                VideoInput(
                    video_id=script.video_id,
                    path=path,
                    checksum=hashlib.sha256(path.read_bytes()).hexdigest(),
                    frame_count=script.duration,
                    resolution=script.resolution,
                    script=script,
                )
            )
    else:
        entries = sorted(
            p for p in cfg.videos_dir.iterdir() if p.is_dir() or p.suffix.lower() == ".mp4"
        )
        for path in entries:
            source = ingest_video(path)
            found.append(
                VideoInput(
                    video_id=source.meta.video_id,
                    path=path,
                    checksum=source.checksum,
                    frame_count=source.meta.duration,
                    resolution=source.meta.resolution,
                    source=source,
                )
            )
    if not found:
        raise ValidationFailure(f"no videos found under {cfg.videos_dir}")
    seen: dict[str, Path] = {}
    for v in found:
        if v.video_id in seen:
            raise ValidationFailure(
                f"duplicate video id {v.video_id!r} ({seen[v.video_id]} and {v.path})"
            )
        seen[v.video_id] = v.path
    return found


def _open_source(video: VideoInput) -> Any:
    return ScriptedFrameSource(video.script) if video.script is not None else video.source


def _adapters_for(cfg: RunConfig, video: VideoInput) -> AdapterSet:
    if cfg.adapters == "scripted":
        return scripted_adapters(video.script)
    ep = cfg.endpoints
    return AdapterSet(
        segmenter=HttpSegmenter(ep.segment, ep.segment),
        depth_estimator=HttpDepthEstimator(ep.depth, ep.depth),
        captioner=HttpCaptioner(ep.caption, ep.caption),
        feature_extractor=ClassicalFeatureExtractor(),
    )


# -- run bookkeeping ---------------------------------------------------------------


def _run_id(cfg: RunConfig, command: str, inputs: dict[str, str]) -> str:
    payload = {"command": command, "config": cfg.to_json_obj(), "inputs": inputs}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:12]


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunLog:
    """Structured JSON-lines run log. The only artifact allowed wall time."""

    def __init__(self, out_dir: Path, run_id: str) -> None:
        self.path = out_dir / "logs" / f"{run_id}.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def event(self, name: str, **fields: Any) -> None:
        record = {"event": name, "time": time.time(), **fields}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def __enter__(self) -> "RunLog":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self._fh.close()


def _over_videos(
    cfg: RunConfig,
    videos: Sequence[VideoInput],
    fn: Callable[[VideoInput], Any],
    log: RunLog,
    stage: str,
) -> list[Any]:
    """Run ``fn`` over videos with a bounded pool; results keep video order."""
    results: list[Any] = [None] * len(videos)
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {pool.submit(fn, v): i for i, v in enumerate(videos)}
        for future, i in futures.items():
            results[i] = future.result()
            log.event(f"{stage}_done", video_id=videos[i].video_id)
    return results


def _make_client(cfg: RunConfig, default_record_path: Path) -> tuple[ModelClient, Optional[Path]]:
    if cfg.transcript_mode is TranscriptMode.PASSTHROUGH:
        return ModelClient(config=cfg.client_config()), None
    tpath = cfg.transcript_path or default_record_path
    transcript = Transcript(tpath, cfg.transcript_mode)
    return ModelClient(config=cfg.client_config(), transcript=transcript), tpath


def _provenance(cfg: RunConfig, videos: Sequence[VideoInput], transcript: Optional[Path]) -> dict:
    gen = cfg.generation
    return {
        "adapter_models": _adapters_for(cfg, videos[0]).model_ids(),
        "chat_model": gen.model,
        "embed_model": cfg.client_config().embed_model,
        "sampling": {
            "temperature": gen.temperature,
            "top_p": gen.top_p,
            "max_tokens": gen.max_tokens,
            "seed": gen.seed,
        },
        "templates": prompts.list_templates(),
        "transcripts": [transcript.name] if transcript else [],
        "config": cfg.to_json_obj(),
    }


def _video_entries(videos: Sequence[VideoInput]) -> list[dict[str, Any]]:
    return [
        {
            "video_id": v.video_id,
            "frames": v.frame_count,
            "resolution": list(v.resolution),
            "checksum": v.checksum,
        }
        for v in videos
    ]


def _write_report(out_dir: Path, name: str, obj: Any, table: str) -> Path:
    reports = out_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    json_path = reports / f"{name}.json"
    json_path.write_text(canonical_json(obj) + "\n", encoding="utf-8")
    (reports / f"{name}.txt").write_text(table + "\n", encoding="utf-8")
    return json_path


# -- commands ----------------------------------------------------------------------


def cmd_build_dt(cfg: RunConfig, args: argparse.Namespace) -> int:
    videos = _discover_videos(cfg)
    run_id = _run_id(cfg, "build-dt", {v.video_id: v.checksum for v in videos})
    if args.dry_run:
        print(f"dry-run ok: build-dt would process {len(videos)} video(s) (run {run_id})")
        return 0
    with RunLog(cfg.out_dir, run_id) as log:
        log.event(
            "run_started",
            command="build-dt",
            run_id=run_id,
            videos=[v.video_id for v in videos],
            workers=cfg.workers,
        )

        def build(video: VideoInput) -> Path:
            twin = build_digital_twin(
                _open_source(video), cfg.perception_config(), _adapters_for(cfg, video)
            )
            return write_twin(twin, cfg.out_dir, externalize_masks=True)

        paths = _over_videos(cfg, videos, build, log, "twin")
        log.event("run_finished", twins=len(paths))
    print(f"built {len(paths)} twin(s) -> {cfg.out_dir / 'twins'} (run {run_id})")
    return 0


def cmd_gen_bench(cfg: RunConfig, args: argparse.Namespace) -> int:
    videos = _discover_videos(cfg)
    run_id = _run_id(cfg, "gen-bench", {v.video_id: v.checksum for v in videos})
    split = cfg.generation.split
    if args.dry_run:
        print(
            f"dry-run ok: gen-bench would draw from {len(videos)} video(s) "
            f"into split {split!r} (run {run_id})"
        )
        return 0
    client, tpath = _make_client(cfg, cfg.out_dir / "transcripts" / f"{run_id}.jsonl")
    params = cfg.generation.sampling_params()
    model = cfg.generation.model
    with RunLog(cfg.out_dir, run_id) as log:
        log.event(
            "run_started",
            command="gen-bench",
            run_id=run_id,
            videos=[v.video_id for v in videos],
            split=split,
            transcript_mode=cfg.transcript_mode.value,
            workers=cfg.workers,
        )

        def generate(video: VideoInput) -> list:
            twin = build_digital_twin(
                _open_source(video), cfg.perception_config(), _adapters_for(cfg, video)
            )
            candidates = select_objects(twin, cfg.generation.candidates, client, model, params)
            return assemble_samples(
                twin, candidates, client, model, params, downsample=cfg.generation.downsample
            )

        per_video = _over_videos(cfg, videos, generate, log, "generation")
        samples = [s for batch in per_video for s in batch]
        spath = write_shard(samples, shard_path(cfg.out_dir, split))
        manifest = build_manifest(
            dataset_id=f"rvt-{split}-{run_id}",
            videos=_video_entries(videos),
            shards=[spath.relative_to(cfg.out_dir).as_posix()],
            provenance=_provenance(cfg, videos, tpath),
        )
        write_manifest(cfg.out_dir, manifest)
        log.event("run_finished", samples=len(samples), shard=spath.name)
    print(f"wrote {len(samples)} sample(s) -> {spath} (run {run_id})")
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    spath = Path(args.shard) if args.shard else shard_path(cfg.out_dir, cfg.generation.split)
    if not spath.is_file():
        raise ValidationFailure(f"shard not found: {spath}")
    pred_path = Path(args.predictions)
    if not pred_path.is_file():
        raise ValidationFailure(f"predictions file not found: {pred_path}")
    samples = load_shard(spath)
    predictions = read_predictions(pred_path)
    run_id = _run_id(
        cfg, "eval", {"shard": _file_digest(spath), "predictions": _file_digest(pred_path)}
    )
    if args.dry_run:
        print(
            f"dry-run ok: eval would score {len(predictions.predictions)} prediction(s) "
            f"against {len(samples)} sample(s) (run {run_id})"
        )
        return 0
    with RunLog(cfg.out_dir, run_id) as log:
        log.event(
            "run_started",
            command="eval",
            run_id=run_id,
            shard=str(spath),
            predictions=str(pred_path),
            samples=len(samples),
        )
        report = evaluate_run(samples, predictions)
        obj = {
            "model": report.model_name,
            "embedder": report.embedder_id,
            "notes": list(report.notes),
            "results": report.to_json_obj(),
        }
        json_path = _write_report(cfg.out_dir, f"eval-{run_id}", obj, format_report_table(report))
        log.event("run_finished", report=json_path.name)
    print(f"evaluated {len(samples)} sample(s): report -> {json_path} (run {run_id})")
    return 0


def cmd_agent(cfg: RunConfig, args: argparse.Namespace) -> int:
    videos = _discover_videos(cfg)
    matches = [v for v in videos if v.video_id == args.video]
    if not matches:
        known = ", ".join(v.video_id for v in videos)
        raise ValidationFailure(f"video {args.video!r} not found (have: {known})")
    video = matches[0]
    if not args.query.strip():
        raise ValidationFailure("query must not be empty")
    run_id = _run_id(cfg, "agent", {"video": video.checksum, "query": args.query})
    if args.dry_run:
        print(f"dry-run ok: agent would answer over video {video.video_id} (run {run_id})")
        return 0
    client, _ = _make_client(cfg, cfg.out_dir / "transcripts" / f"{run_id}.jsonl")
    params = cfg.generation.sampling_params()
    model = cfg.generation.model
    with RunLog(cfg.out_dir, run_id) as log:
        log.event(
            "run_started", command="agent", run_id=run_id, video_id=video.video_id, query=args.query
        )
        task_plan = plan(args.query, client, model, params)
        log.event("planned", ops=[n.op for n in task_plan.nodes], task=task_plan.task.value)
        twin = build_task_twin(
            _open_source(video), cfg.perception_config(), _adapters_for(cfg, video), task_plan
        )
        answer = execute(
            task_plan,
            twin,
            client=client,
            model=model,
            embedder=ClientEmbedder(client),
            params=params,
        )
        obj = {
            "query": args.query,
            "video_id": video.video_id,
            "task": task_plan.task.value,
            "plan": plan_to_json_obj(task_plan),
            "answer": ground_truth_to_json(answer),
        }
        reports = cfg.out_dir / "reports"
        reports.mkdir(parents=True, exist_ok=True)
        out_path = reports / f"agent-{run_id}.json"
        out_path.write_text(canonical_json(obj) + "\n", encoding="utf-8")
        log.event("run_finished", answer_kind=answer.kind, report=out_path.name)
    print(f"{task_plan.task.value} answer ({answer.kind}) -> {out_path} (run {run_id})")
    return 0


def cmd_stats(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.shard:
        shards = [Path(s) for s in args.shard]
    else:
        shards = sorted((cfg.out_dir / "shards").glob("*.jsonl"))
    if not shards:
        raise ValidationFailure(f"no shards found under {cfg.out_dir / 'shards'}")
    for s in shards:
        if not s.is_file():
            raise ValidationFailure(f"shard not found: {s}")
    run_id = _run_id(cfg, "stats", {s.name: _file_digest(s) for s in shards})
    if args.dry_run:
        print(f"dry-run ok: stats would read {len(shards)} shard(s) (run {run_id})")
        return 0
    stats = compute_dataset_stats(shards)
    with RunLog(cfg.out_dir, run_id) as log:
        log.event(
            "run_started", command="stats", run_id=run_id, shards=[str(s) for s in shards]
        )
        json_path = _write_report(
            cfg.out_dir, f"stats-{run_id}", stats.to_json_obj(), format_stats_table(stats)
        )
        log.event("run_finished", report=json_path.name)
    print(
        f"{stats.totals['queries']} queries, {stats.totals['tokens']} tokens "
        f"across {len(shards)} shard(s) -> {json_path} (run {run_id})"
    )
    return 0


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "build-dt": cmd_build_dt,
    "gen-bench": cmd_gen_bench,
    "eval": cmd_eval,
    "agent": cmd_agent,
    "stats": cmd_stats,
    "replay": cmd_gen_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        args = build_parser().parse_args(argv)
        overrides = {
            "out_dir": args.out,
            "transcript_path": args.transcript,
            "transcript_mode": args.mode,
            "workers": args.workers,
        }
        if args.command == "replay":
            if args.transcript is None:
                raise ValidationFailure("replay needs --transcript")
            overrides["transcript_mode"] = TranscriptMode.REPLAY.value
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
