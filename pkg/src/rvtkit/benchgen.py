"""Benchmark sample generation.

Turns a digital twin plus its per-candidate reasoning trees into benchmark
samples: an implicit natural-language query per difficulty level, the matching
ground truth (masks, boxes, or text), shard files, and dataset statistics.

Queries are "implicit" in a strict sense: they may describe the target only
through the entities, attributes, and relations of the level subtree, and must
never contain a tracked instance id. Both properties are enforced — the id
guard by substring scan, the subtree grounding by a second model pass that
confirms each chain element is echoed (verbatim or paraphrased) in the query.
A query that fails either check is regenerated once and then skipped, so bad
generations cost one retry, never silent bad data.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from . import prompts
from .dtcore import (
    ArgumentError,
    BoxSequence,
    DigitalTwin,
    MaskSequence,
    ReasoningCategory,
    RVTSample,
    SchemaError,
    TaskType,
    TextAnswer,
    downsample_twin,
    errors_only,
    mask_bbox,
    sample_from_json_obj,
    sample_to_json_obj,
    serialize_twin,
    validate_sample,
)
from .errors import PipelineFault, ValidationFailure
from .modelio import (
    ChatRequest,
    GenerationError,
    Message,
    ModelClient,
    SamplingParams,
    canonical_json,
)
from .treegen import (
    CandidateObject,
    LevelSubtree,
    ReasoningNode,
    assign_task_type,
    build_reasoning_tree,
    extract_level_subtree,
    subtree_to_json_obj,
)

logger = logging.getLogger(__name__)

LEVELS = (1, 2, 3, 4)
VQA_MAX_TOKENS = 120
SUMMARY_MIN_TOKENS = 40
SUMMARY_MAX_TOKENS = 200

_TASK_ORDER = tuple(t.value for t in TaskType)
_CATEGORY_ORDER = tuple(c.value for c in ReasoningCategory)


class ExtractionError(PipelineFault):
    """Ground truth cannot be read off the twin for this sample."""


@dataclass(frozen=True)
class QueryRecord:
    query: str
    categories: frozenset[ReasoningCategory]
    level: int

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ArgumentError("query must be non-empty")
        if not self.categories:
            raise ArgumentError("category set must be non-empty")
        if self.level not in LEVELS:
            raise ArgumentError(f"level must be 1..4, got {self.level}")


QUERY_SCHEMA = {
    "type": "object",
    "required": ["query", "categories"],
    "properties": {
        "query": {"type": "string", "minLength": 1},
        "categories": {"type": "array", "items": {"type": "string"}},
    },
}

CHECKLIST_SCHEMA = {
    "type": "object",
    "required": ["checks"],
    "properties": {
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["element", "ok"],
                "properties": {"element": {"type": "string"}, "ok": {"type": "boolean"}},
            },
        }
    },
}


# -- query generation ----------------------------------------------------------


def _subtree_root(subtree: LevelSubtree) -> ReasoningNode:
    for node in subtree.nodes:
        if node.node_id == subtree.root_id:
            return node
    raise ArgumentError(f"subtree has no node {subtree.root_id!r}")


def _instance_name(twin: DigitalTwin, instance_id: str) -> str:
    for frame in twin.frames:
        inst = frame.instances.get(instance_id)
        if inst is not None and inst.description:
            return inst.description
    return ""


def subtree_elements(twin: DigitalTwin, subtree: LevelSubtree) -> list[str]:
    """Human-readable strings the query is expected to echo.

    Instance-id entities are replaced by their twin descriptions; names that
    are empty or themselves carry a tracked id are dropped — they cannot be
    referenced without breaking implicitness.
    """
    ids = twin.instance_ids()
    out: list[str] = []
    seen: set[str] = set()

    def add(text: str) -> None:
        text = text.strip()
        if not text or text in seen or any(i in text for i in ids):
            return
        seen.add(text)
        out.append(text)

    for node in subtree.nodes:
        add(_instance_name(twin, node.entity) if node.entity in ids else node.entity)
        for attr in node.attributes:
            add(attr)
    for edge in subtree.edges:
        add(edge.relation.replace("_", " "))
    return out


def _leaked_ids(query: str, twin: DigitalTwin) -> list[str]:
    lowered = query.lower()
    return sorted(i for i in twin.instance_ids() if i and i.lower() in lowered)


def _unconfirmed_elements(
    query: str,
    elements: Sequence[str],
    client: ModelClient,
    model: str,
    params: SamplingParams,
) -> list[str]:
    if not elements:
        return []
    prompt = prompts.render(
        "benchgen", "checklist", query=query, elements=canonical_json(list(elements))
    )
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    raw, _ = client.chat_structured(request, CHECKLIST_SCHEMA)
    verdicts = {c["element"]: bool(c["ok"]) for c in raw["checks"]}
    return [e for e in elements if not verdicts.get(e, False)]


def _query_problems(
    query: str,
    twin: DigitalTwin,
    elements: Sequence[str],
    client: ModelClient,
    model: str,
    params: SamplingParams,
) -> list[str]:
    leaked = _leaked_ids(query, twin)
    if leaked:
        # No point auditing grounding when the query must be rewritten anyway.
        return ["query leaks internal instance ids: " + ", ".join(leaked)]
    missing = _unconfirmed_elements(query, elements, client, model, params)
    if missing:
        return ["query does not reference: " + "; ".join(repr(m) for m in missing)]
    return []


def generate_query(
    twin: DigitalTwin,
    candidate: CandidateObject,
    task: TaskType,
    subtree: LevelSubtree,
    level: int,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> Optional[QueryRecord]:
    """One implicit query for (candidate, task, level), or None after a failed
    regeneration (the skip is logged, never silent)."""
    if subtree.level != level:
        raise ArgumentError(f"subtree is for level {subtree.level}, asked for {level}")
    root = _subtree_root(subtree)
    if root.entity != candidate.instance_id:
        raise ArgumentError(
            f"subtree is rooted at {root.entity!r}, not candidate {candidate.instance_id!r}"
        )
    elements = subtree_elements(twin, subtree)
    prompt = prompts.render(
        "benchgen",
        "query",
        task=task.value,
        level=str(level),
        twin=serialize_twin(twin, profile="prompt"),
        subtree=canonical_json(subtree_to_json_obj(subtree)),
    )
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    raw, response = client.chat_structured(request, QUERY_SCHEMA)
    query = raw["query"].strip()
    problems = _query_problems(query, twin, elements, client, model, params)
    if problems:
        repair = request.appended(
            Message(role="assistant", text=response.text),
            Message(
                role="user",
                text=(
                    "The query failed validation: "
                    + "; ".join(problems)
                    + ". Write a corrected query and reply in the same JSON shape."
                ),
            ),
        )
        raw, _ = client.chat_structured(repair, QUERY_SCHEMA)
        query = raw["query"].strip()
        problems = _query_problems(query, twin, elements, client, model, params)
        if problems:
            logger.warning(
                "query for %s level %d failed validation twice (%s); sample skipped",
                candidate.instance_id,
                level,
                "; ".join(problems),
            )
            return None
    return QueryRecord(
        query=query, categories=_categories(subtree, raw.get("categories", [])), level=level
    )


def _categories(subtree: LevelSubtree, reported: Sequence[Any]) -> frozenset[ReasoningCategory]:
    """Edge kinds actually used, intersected with the model's self-report."""
    claimed: set[ReasoningCategory] = set()
    for name in reported:
        try:
            claimed.add(ReasoningCategory(str(name).strip().lower()))
        except ValueError:
            logger.warning("ignoring unknown reasoning category %r", name)
    agreed = subtree.edge_kinds() & claimed
    return frozenset(agreed) if agreed else frozenset({ReasoningCategory.SEMANTIC})


# -- ground truth ----------------------------------------------------------------


def extract_ground_truth_masks(
    twin: DigitalTwin, root_instance_id: str, subtree: LevelSubtree
) -> MaskSequence:
    """The root instance's masks, one entry per twin frame (empty ones kept).

    Subtrees rooted at a derived entity (an object part, a group) have no
    tracked mask, so they raise rather than approximate.
    """
    root = _subtree_root(subtree)
    if root.entity not in twin.instance_ids():
        raise ExtractionError(
            f"subtree root {root.entity!r} is not a tracked instance; no mask to extract"
        )
    if root.entity != root_instance_id:
        raise ExtractionError(
            f"subtree root {root.entity!r} does not match target {root_instance_id!r}"
        )
    frames: dict[int, tuple[Any, ...]] = {}
    for frame in twin.frames:
        inst = frame.instances.get(root.entity)
        frames[frame.timestamp] = (
            () if inst is None or inst.mask.is_empty() else (inst.mask,)
        )
    return MaskSequence(frames=frames)


def masks_to_boxes(masks: MaskSequence) -> BoxSequence:
    """Tight axis-aligned box per mask; empty masks contribute no box."""
    frames: dict[int, tuple[tuple[int, int, int, int], ...]] = {}
    for t, entries in masks.frames.items():
        frames[t] = tuple(b for b in (mask_bbox(m) for m in entries) if b is not None)
    return BoxSequence(frames=frames)


def _acceptable_text(raw: str, task: TaskType) -> Optional[str]:
    tokens = raw.split()
    if not tokens:
        return None
    if task is TaskType.SUMMARY and len(tokens) < SUMMARY_MIN_TOKENS:
        return None
    cap = VQA_MAX_TOKENS if task is TaskType.VQA else SUMMARY_MAX_TOKENS
    if len(tokens) > cap:
        logger.warning(
            "truncating %s ground truth from %d to %d tokens", task.value, len(tokens), cap
        )
        return " ".join(tokens[:cap])
    return raw.strip()


def generate_text_ground_truth(
    twin: DigitalTwin,
    record: QueryRecord,
    task: TaskType,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> Optional[str]:
    """Reference answer (vqa, <= 120 tokens) or summary (40-200 tokens).

    Overlong outputs are truncated; empty or too-short ones get one retry and
    then the sample is skipped (None).
    """
    if task not in (TaskType.SUMMARY, TaskType.VQA):
        raise ArgumentError(f"text ground truth applies to summary/vqa, not {task.value!r}")
    guidance = (
        f"Answer the question in at most {VQA_MAX_TOKENS} words."
        if task is TaskType.VQA
        else f"Write a summary of {SUMMARY_MIN_TOKENS} to {SUMMARY_MAX_TOKENS} words."
    )
    prompt = prompts.render(
        "benchgen",
        "text_gt",
        task=task.value,
        query=record.query,
        twin=serialize_twin(twin, profile="prompt"),
        guidance=guidance,
    )
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    response = client.chat(request)
    text = _acceptable_text(response.text, task)
    if text is None:
        retry = request.appended(
            Message(role="assistant", text=response.text),
            Message(
                role="user",
                text=f"That response was empty or too short. {guidance} Reply with the text only.",
            ),
        )
        text = _acceptable_text(client.chat(retry).text, task)
        if text is None:
            logger.warning(
                "%s ground truth for %r stayed empty or too short after one retry; sample skipped",
                task.value,
                record.query,
            )
    return text


# -- assembly ----------------------------------------------------------------------


def _ground_truth_for(
    task: TaskType,
    twin: DigitalTwin,
    sampled: DigitalTwin,
    candidate: CandidateObject,
    record: QueryRecord,
    subtree: LevelSubtree,
    client: ModelClient,
    model: str,
    params: SamplingParams,
):
    if task in (TaskType.SEGMENTATION, TaskType.GROUNDING):
        masks = extract_ground_truth_masks(twin, candidate.instance_id, subtree)
        return masks if task is TaskType.SEGMENTATION else masks_to_boxes(masks)
    text = generate_text_ground_truth(sampled, record, task, client, model, params)
    return None if text is None else TextAnswer(text=text)


def assemble_samples(
    twin: DigitalTwin,
    candidates: Sequence[CandidateObject],
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
    downsample: int = 1,
) -> list[RVTSample]:
    """Four samples (levels 1-4) per candidate, minus logged skips.

    Prompts see the downsampled twin; mask/box ground truth always comes from
    the full twin.
    """
    sampled = downsample_twin(twin, downsample) if downsample > 1 else twin
    known_ids = twin.instance_ids()
    video_id = twin.metadata.video_id
    samples: list[RVTSample] = []
    for candidate in candidates:
        task = assign_task_type(candidate, sampled, client, model, params)
        try:
            tree = build_reasoning_tree(sampled, candidate, client, model, params)
        except GenerationError as exc:
            logger.warning(
                "no usable reasoning tree for %s (%s); candidate skipped",
                candidate.instance_id,
                exc,
            )
            continue
        for level in LEVELS:
            subtree = extract_level_subtree(tree, level)
            record = generate_query(sampled, candidate, task, subtree, level, client, model, params)
            if record is None:
                continue
            try:
                gt = _ground_truth_for(
                    task, twin, sampled, candidate, record, subtree, client, model, params
                )
            except ExtractionError as exc:
                logger.warning(
                    "level %d for %s skipped: %s", level, candidate.instance_id, exc
                )
                continue
            if gt is None:
                continue
            sample = RVTSample(
                sample_id=f"{video_id}-{candidate.instance_id}-l{level}",
                video_id=video_id,
                task=task,
                query=record.query,
                categories=record.categories,
                level=record.level,
                ground_truth=gt,
                target_instance_id=candidate.instance_id,
                subtree_ref=subtree_to_json_obj(subtree),
            )
            bad = errors_only(
                validate_sample(
                    sample, resolution=twin.metadata.resolution, known_instance_ids=known_ids
                )
            )
            if bad:
                logger.warning(
                    "sample %s failed validation (%s); skipped",
                    sample.sample_id,
                    "; ".join(str(v) for v in bad),
                )
                continue
            samples.append(sample)
    return samples


# -- shards ------------------------------------------------------------------------


def shard_path(root: Path | str, split: str) -> Path:
    return Path(root) / "shards" / f"rvt-{split}.jsonl"


def write_shard(samples: Sequence[RVTSample], path: Path | str) -> Path:
    """One canonical-JSON sample per line; refuses any invalid sample."""
    path = Path(path)
    lines: list[str] = []
    seen: set[str] = set()
    for i, sample in enumerate(samples):
        bad = errors_only(validate_sample(sample))
        if bad:
            raise SchemaError(f"samples[{i}]", "; ".join(f"{v.path}: {v.rule}" for v in bad))
        if sample.sample_id in seen:
            raise SchemaError(f"samples[{i}].sample_id", f"duplicate {sample.sample_id!r}")
        seen.add(sample.sample_id)
        lines.append(canonical_json(sample_to_json_obj(sample)))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def load_shard(path: Path | str) -> list[RVTSample]:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ValidationFailure(f"shard not found: {path}") from exc
    out: list[RVTSample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(where, f"invalid JSON: {exc}") from exc
        sample = sample_from_json_obj(obj)
        bad = errors_only(validate_sample(sample))
        if bad:
            raise SchemaError(where, "; ".join(f"{v.path}: {v.rule}" for v in bad))
        if sample.sample_id in seen:
            raise SchemaError(where, f"duplicate sample_id {sample.sample_id!r}")
        seen.add(sample.sample_id)
        out.append(sample)
    return out


# -- statistics ---------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    totals: dict[str, int]
    by_level: dict[int, float]
    by_task: dict[str, float]
    by_category: dict[str, float]
    per_video: dict[str, int]

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "totals": dict(self.totals),
            "token_share_by_level": {str(k): v for k, v in self.by_level.items()},
            "token_share_by_task": dict(self.by_task),
            "token_share_by_category": dict(self.by_category),
            "queries_per_video": dict(self.per_video),
        }


def sample_token_count(sample: RVTSample) -> int:
    """Whitespace tokens over the query plus any text ground truth."""
    n = len(sample.query.split())
    if isinstance(sample.ground_truth, TextAnswer):
        n += len(sample.ground_truth.text.split())
    return n


def _shares(mass_by_key: dict, order: Sequence) -> dict:
    total = sum(mass_by_key.values())
    if total == 0:
        return {}
    ordered = [k for k in order if k in mass_by_key]
    ordered += sorted(k for k in mass_by_key if k not in set(order))
    return {k: round(100.0 * mass_by_key[k] / total, 2) for k in ordered}


def stats_of(samples: Sequence[RVTSample]) -> DatasetStats:
    tokens_by_level: Counter = Counter()
    tokens_by_task: Counter = Counter()
    tokens_by_category: Counter = Counter()
    per_video: Counter = Counter()
    total = 0
    for s in samples:
        n = sample_token_count(s)
        total += n
        tokens_by_level[s.level] += n
        tokens_by_task[s.task.value] += n
        for c in s.categories:
            tokens_by_category[c.value] += n
        per_video[s.video_id] += 1
    return DatasetStats(
        totals={"queries": len(samples), "tokens": total},
        by_level=_shares(tokens_by_level, sorted(tokens_by_level)),
        by_task=_shares(tokens_by_task, _TASK_ORDER),
        by_category=_shares(tokens_by_category, _CATEGORY_ORDER),
        per_video=dict(sorted(per_video.items())),
    )


def compute_dataset_stats(shards: Sequence[Path | str]) -> DatasetStats:
    if not shards:
        raise ArgumentError("need at least one shard")
    samples: list[RVTSample] = []
    for p in shards:
        samples.extend(load_shard(p))
    return stats_of(samples)


def format_stats_table(stats: DatasetStats) -> str:
    lines = [
        "dataset totals",
        f"  queries  {stats.totals['queries']}",
        f"  tokens   {stats.totals['tokens']}",
    ]
    sections = [
        ("token share by level", {f"level {k}": v for k, v in stats.by_level.items()}),
        ("token share by task", stats.by_task),
        ("token share by category", stats.by_category),
    ]
    for title, rows in sections:
        if not rows:
            continue
        width = max(len(k) for k in rows)
        lines += ["", title]
        lines += [f"  {k:<{width}}  {v:6.2f}%" for k, v in rows.items()]
    if stats.per_video:
        width = max(len(k) for k in stats.per_video)
        lines += ["", "queries per video"]
        lines += [f"  {k:<{width}}  {v}" for k, v in stats.per_video.items()]
    return "\n".join(lines)
