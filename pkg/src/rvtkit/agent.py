"""Plan-and-execute baseline: plan a reasoning graph from a query, build the
twin fields that graph needs, execute it over the twin, and emit the
task-shaped answer.

Most execution is deterministic twin lookup; only planning and explicit
``llm_fallback`` nodes talk to a language model, so a recorded transcript
replays to identical output.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import prompts
from .dtcore import (
    RELATION_INVERSE,
    ArgumentError,
    BoxSequence,
    DigitalTwin,
    GroundTruth,
    MaskSequence,
    SchemaError,
    TaskType,
    TextAnswer,
    VisualFeatures,
    mask_bbox,
    serialize_twin,
)
from .errors import PipelineFault, ValidationFailure
from .modelio import ChatRequest, Message, ModelClient, SamplingParams, cosine
from .perception import AdapterSet, FrameSource, PerceptionConfig, build_digital_twin

logger = logging.getLogger(__name__)


class PlanningError(PipelineFault):
    """The model could not produce a valid reasoning graph."""


class CapabilityError(ValidationFailure):
    """A required capability has no adapter, or the twin lacks its fields."""


class ExecutionError(PipelineFault):
    """A graph node failed; the message names the node."""


CAPABILITIES = ("segmentation", "depth", "captioning", "features")

OP_REQUIRED_PARAMS: dict[str, tuple[str, ...]] = {
    "select_instances_by_attribute": ("attribute",),
    "filter_by_spatial_relation": ("relation", "reference"),
    "filter_by_temporal_event": ("event",),
    "resolve_part": ("part",),
    "aggregate_describe": (),
    "answer_question": ("question",),
    "emit_masks": (),
    "emit_boxes": (),
    "llm_fallback": ("instruction",),
}
OP_VOCABULARY = frozenset(OP_REQUIRED_PARAMS)

OP_CAPABILITIES: dict[str, frozenset[str]] = {
    "select_instances_by_attribute": frozenset({"segmentation", "captioning"}),
    "filter_by_spatial_relation": frozenset({"segmentation", "depth", "captioning"}),
    "filter_by_temporal_event": frozenset({"segmentation", "features"}),
    "resolve_part": frozenset({"segmentation", "captioning"}),
    "aggregate_describe": frozenset({"segmentation", "captioning"}),
    "answer_question": frozenset({"segmentation", "captioning"}),
    "emit_masks": frozenset({"segmentation"}),
    "emit_boxes": frozenset({"segmentation"}),
    "llm_fallback": frozenset({"segmentation", "captioning"}),
}

SINK_OP_FOR_TASK = {
    TaskType.SEGMENTATION: "emit_masks",
    TaskType.GROUNDING: "emit_boxes",
    TaskType.SUMMARY: "aggregate_describe",
    TaskType.VQA: "answer_question",
}

TEMPORAL_EVENTS = ("appears", "present_from_start", "disappears", "moving", "static")

SIMILARITY_THRESHOLD = 0.8
MOTION_THRESHOLD = 0.5  # mean flow magnitude, px/frame

PLAN_SCHEMA = {
    "type": "object",
    "required": ["task", "nodes"],
    "properties": {
        "task": {"type": "string"},
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["node_id", "op"],
                "properties": {
                    "node_id": {"type": "string", "minLength": 1},
                    "op": {"type": "string"},
                    "params": {"type": "object"},
                    "inputs": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}

FALLBACK_SCHEMA = {
    "type": "object",
    "required": ["instances"],
    "properties": {"instances": {"type": "array", "items": {"type": "string"}}},
}


@dataclass(frozen=True)
class OpNode:
    """One atomic operation; ``inputs`` name the nodes whose survivors it consumes."""

    node_id: str
    op: str
    params: Mapping[str, str] = field(default_factory=dict)
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Plan:
    task: TaskType
    nodes: tuple[OpNode, ...]
    required_capabilities: frozenset[str]


def required_capabilities_of(nodes: Sequence[OpNode]) -> frozenset[str]:
    caps: set[str] = set()
    for node in nodes:
        caps |= OP_CAPABILITIES.get(node.op, frozenset({"segmentation"}))
    return frozenset(caps)


def make_plan(task: TaskType, nodes: Sequence[OpNode]) -> Plan:
    nodes = tuple(nodes)
    return Plan(task=task, nodes=nodes, required_capabilities=required_capabilities_of(nodes))


def validate_plan(plan: Plan) -> list[str]:
    """Every structural problem in the graph, empty when it is sound."""
    problems: list[str] = []
    if not plan.nodes:
        return ["plan has no nodes"]
    ids = [n.node_id for n in plan.nodes]
    known = set(ids)
    if len(known) != len(ids):
        problems.append("duplicate node_ids")
    consumed: set[str] = set()
    for node in plan.nodes:
        if node.op not in OP_VOCABULARY:
            problems.append(f"node {node.node_id}: unknown operation {node.op!r}")
            continue
        for name in OP_REQUIRED_PARAMS[node.op]:
            if not str(node.params.get(name, "")).strip():
                problems.append(f"node {node.node_id}: missing parameter {name!r}")
        if node.op == "filter_by_temporal_event":
            event = str(node.params.get("event", ""))
            if event and event not in TEMPORAL_EVENTS:
                problems.append(
                    f"node {node.node_id}: unknown event {event!r}; "
                    f"expected one of {', '.join(TEMPORAL_EVENTS)}"
                )
        for input_id in node.inputs:
            if input_id not in known:
                problems.append(f"node {node.node_id}: unknown input {input_id!r}")
            elif input_id == node.node_id:
                problems.append(f"node {node.node_id}: reads its own output")
            else:
                consumed.add(input_id)
    sinks = [n for n in plan.nodes if n.node_id not in consumed]
    if len(sinks) != 1:
        problems.append(f"expected exactly one final node, found {len(sinks)}")
    else:
        expected = SINK_OP_FOR_TASK[plan.task]
        if sinks[0].op != expected:
            problems.append(
                f"final node must be {expected} for task {plan.task.value}, "
                f"got {sinks[0].op}"
            )
    output_ops = ("emit_masks", "emit_boxes", "aggregate_describe", "answer_question")
    for node in plan.nodes:
        if node.op in output_ops and node.node_id in consumed:
            problems.append(f"node {node.node_id}: {node.op} must be the final node")
    if _topological_order(plan.nodes) is None:
        problems.append("graph contains a cycle")
    return problems


def _topological_order(nodes: Sequence[OpNode]) -> Optional[list[OpNode]]:
    """Kahn's ordering with node_id tie-breaks, or None on a cycle."""
    by_id = {n.node_id: n for n in nodes}
    remaining_inputs = {
        n.node_id: {i for i in n.inputs if i in by_id and i != n.node_id} for n in nodes
    }
    dependents: dict[str, set[str]] = {n.node_id: set() for n in nodes}
    for node_id, inputs in remaining_inputs.items():
        for input_id in inputs:
            dependents[input_id].add(node_id)
    ready = sorted(node_id for node_id, inputs in remaining_inputs.items() if not inputs)
    order: list[OpNode] = []
    while ready:
        node_id = ready.pop(0)
        order.append(by_id[node_id])
        for dependent in sorted(dependents[node_id]):
            remaining_inputs[dependent].discard(node_id)
            if not remaining_inputs[dependent]:
                ready.append(dependent)
        ready.sort()
    if len(order) != len(nodes):
        return None
    return order


# -- planning -----------------------------------------------------------------


def _interpret_reply(reply: Any) -> tuple[Optional[Plan], list[str]]:
    raw_task = str(reply.get("task", ""))
    try:
        task = TaskType(raw_task)
    except ValueError:
        return None, [f"unknown task {raw_task!r}; expected one of "
                      + ", ".join(t.value for t in TaskType)]
    nodes = []
    for entry in reply["nodes"]:
        params = entry.get("params", {})
        nodes.append(
            OpNode(
                node_id=str(entry["node_id"]),
                op=str(entry["op"]),
                params={str(k): str(v) for k, v in params.items()},
                inputs=tuple(str(i) for i in entry.get("inputs", ())),
            )
        )
    candidate = make_plan(task, nodes)
    return candidate, validate_plan(candidate)


def plan(
    query: str,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> Plan:
    """Ask the model for a task type and reasoning graph; repair once."""
    if not query.strip():
        raise ArgumentError("query must be non-empty")
    prompt = prompts.render("agent", "plan", query=query)
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    reply, response = client.chat_structured(request, PLAN_SCHEMA)
    candidate, problems = _interpret_reply(reply)
    if not problems:
        return candidate
    repair = request.appended(
        Message(role="assistant", text=response.text),
        Message(
            role="user",
            text=(
                "The plan failed validation: "
                + "; ".join(problems)
                + ". Respond again with one corrected JSON object and nothing else."
            ),
        ),
    )
    reply, _ = client.chat_structured(repair, PLAN_SCHEMA)
    candidate, problems = _interpret_reply(reply)
    if problems:
        raise PlanningError("plan invalid after repair: " + "; ".join(problems))
    return candidate


def plan_to_json_obj(p: Plan) -> dict[str, Any]:
    return {
        "task": p.task.value,
        "required_capabilities": sorted(p.required_capabilities),
        "nodes": [
            {
                "node_id": n.node_id,
                "op": n.op,
                "params": dict(sorted(n.params.items())),
                "inputs": list(n.inputs),
            }
            for n in p.nodes
        ],
    }


def plan_from_json_obj(obj: Any) -> Plan:
    if not isinstance(obj, dict) or "task" not in obj or "nodes" not in obj:
        raise SchemaError("plan", "expected an object with task and nodes")
    try:
        task = TaskType(str(obj["task"]))
    except ValueError as exc:
        raise SchemaError("plan.task", str(exc)) from exc
    nodes = tuple(
        OpNode(
            node_id=str(entry["node_id"]),
            op=str(entry["op"]),
            params={str(k): str(v) for k, v in entry.get("params", {}).items()},
            inputs=tuple(str(i) for i in entry.get("inputs", ())),
        )
        for entry in obj["nodes"]
    )
    loaded = make_plan(task, nodes)
    problems = validate_plan(loaded)
    if problems:
        raise SchemaError("plan", "; ".join(problems))
    return loaded


# -- adapter selection ----------------------------------------------------------


@dataclass(frozen=True)
class AdapterChoice:
    """Registry row: which hosted model serves one capability."""

    capability: str
    adapter_id: str
    priority: int
    endpoint: str = ""
    model: str = ""


def load_registry(path: Path | str) -> dict[str, tuple[AdapterChoice, ...]]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationFailure(f"registry file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(str(path), "registry must map capability to adapter lists")
    registry: dict[str, tuple[AdapterChoice, ...]] = {}
    for capability, entries in obj.items():
        if capability not in CAPABILITIES:
            raise SchemaError(str(path), f"unknown capability {capability!r}")
        if not isinstance(entries, list):
            raise SchemaError(str(path), f"{capability}: expected a list of adapters")
        rows = []
        for entry in entries:
            if not isinstance(entry, dict) or "id" not in entry:
                raise SchemaError(str(path), f"{capability}: adapter entries need an id")
            rows.append(
                AdapterChoice(
                    capability=capability,
                    adapter_id=str(entry["id"]),
                    priority=int(entry.get("priority", 0)),
                    endpoint=str(entry.get("endpoint", "")),
                    model=str(entry.get("model", "")),
                )
            )
        registry[capability] = tuple(rows)
    return registry


def select_adapters(
    p: Plan, registry: Mapping[str, Sequence[AdapterChoice]]
) -> dict[str, AdapterChoice]:
    """One adapter per required capability: highest priority, ties by id."""
    chosen: dict[str, AdapterChoice] = {}
    for capability in sorted(p.required_capabilities):
        entries = registry.get(capability, ())
        if not entries:
            raise CapabilityError(f"no adapter registered for capability {capability!r}")
        chosen[capability] = min(entries, key=lambda e: (-e.priority, e.adapter_id))
    return chosen


# -- task-specific twin construction ---------------------------------------------


class _InertDepth:
    model_id = "inert"

    def depth_map(self, t: int, image: np.ndarray) -> np.ndarray:
        return np.zeros(image.shape[:2], dtype=np.float64)


class _InertCaptioner:
    model_id = "inert"

    def describe_instance(self, t, image, bitmap) -> str:
        return "unused"

    def describe_scene(self, t, image) -> str:
        return "unused"

    def describe_video(self, images, timestamps) -> str:
        return "unused"


class _InertFeatures:
    model_id = "inert"

    def extract(self, image, bitmap, previous) -> VisualFeatures:
        uniform = tuple(tuple(1.0 / 8 for _ in range(8)) for _ in range(3))
        return VisualFeatures(color_histogram=uniform, motion=(0.0, 0.0), texture=0.0)


def _strip_unrequired(twin: DigitalTwin, capabilities: frozenset[str]) -> DigitalTwin:
    frames = []
    for frame in twin.frames:
        instances = {}
        for iid, inst in frame.instances.items():
            if "depth" not in capabilities:
                inst = replace(inst, depth_stats=None)
            if "features" not in capabilities:
                inst = replace(inst, visual_features=None)
            if "captioning" not in capabilities:
                inst = replace(inst, description="")
            instances[iid] = inst
        if "depth" not in capabilities:
            frame = replace(frame, spatial_description="", spatial_relations=())
        if "captioning" not in capabilities:
            frame = replace(frame, scene_description="")
        frames.append(replace(frame, instances=instances))
    metadata = twin.metadata
    if "captioning" not in capabilities:
        metadata = replace(metadata, description="")
    return replace(twin, metadata=metadata, frames=tuple(frames))


def build_task_twin(
    source: FrameSource,
    config: PerceptionConfig,
    adapters: AdapterSet,
    p: Plan,
    partial_path: Optional[Path] = None,
) -> DigitalTwin:
    """Build only the twin fields the plan's operations consult.

    A full-capability plan takes the unmodified perception path, so its twin
    is identical to the standalone pipeline's output. Gated capabilities get
    inert stand-in adapters and their fields are nulled afterwards.
    """
    capabilities = p.required_capabilities
    gated = AdapterSet(
        segmenter=adapters.segmenter,
        depth_estimator=adapters.depth_estimator if "depth" in capabilities else _InertDepth(),
        captioner=adapters.captioner if "captioning" in capabilities else _InertCaptioner(),
        feature_extractor=(
            adapters.feature_extractor if "features" in capabilities else _InertFeatures()
        ),
    )
    twin = build_digital_twin(source, config, gated, partial_path)
    if capabilities >= set(CAPABILITIES):
        return twin
    return _strip_unrequired(twin, capabilities)


# -- execution -------------------------------------------------------------------


class _TwinIndex:
    """Read-only lookups the structured operations consult."""

    def __init__(self, twin: DigitalTwin) -> None:
        self.twin = twin
        self.instance_ids = sorted(twin.instance_ids())
        self.descriptions: dict[str, str] = {}
        self.relation_triples: set[tuple[str, str, str]] = set()
        self.first_seen = twin.first_seen()
        self.last_seen: dict[str, int] = {}
        self.motion: dict[str, float] = {}
        motion_sums: dict[str, list[float]] = {}
        self.scene_text = ""
        for frame in twin.frames:
            if not self.scene_text and frame.scene_description.strip():
                self.scene_text = frame.scene_description.strip()
            for rel in frame.spatial_relations:
                self.relation_triples.add((rel.subject, rel.relation, rel.object))
            for iid, inst in frame.instances.items():
                if iid not in self.descriptions and inst.description.strip():
                    self.descriptions[iid] = inst.description.strip()
                if not inst.mask.is_empty():
                    self.last_seen[iid] = frame.timestamp
                if inst.visual_features is not None:
                    dx, dy = inst.visual_features.motion
                    motion_sums.setdefault(iid, []).append(float(np.hypot(dx, dy)))
        for iid, magnitudes in motion_sums.items():
            self.motion[iid] = sum(magnitudes) / len(magnitudes)

    def description(self, iid: str) -> str:
        return self.descriptions.get(iid, "")


def _similarity(embedder: Any, a: str, b: str) -> float:
    va, vb = embedder.embed([a, b])
    return cosine(va, vb)


def _matches(needle: str, haystack: str, embedder: Any) -> bool:
    """Case-insensitive substring, backstopped by embedding paraphrase match."""
    if not haystack:
        return False
    if needle.lower().strip() in haystack.lower():
        return True
    if embedder is None:
        return False
    return _similarity(embedder, needle, haystack) >= SIMILARITY_THRESHOLD


def _check_twin_capabilities(twin: DigitalTwin, capabilities: frozenset[str]) -> None:
    instances = [inst for frame in twin.frames for inst in frame.instances.values()]
    if not instances:
        return
    if "depth" in capabilities and not any(i.depth_stats is not None for i in instances):
        raise CapabilityError("twin lacks depth statistics required by the plan")
    if "features" in capabilities and not any(i.visual_features is not None for i in instances):
        raise CapabilityError("twin lacks visual features required by the plan")
    if "captioning" in capabilities and not any(i.description.strip() for i in instances):
        raise CapabilityError("twin lacks instance descriptions required by the plan")


def _temporal_survivors(
    index: _TwinIndex, candidates: frozenset[str], event: str
) -> frozenset[str]:
    duration = index.twin.metadata.duration
    if event == "appears":
        return frozenset(i for i in candidates if index.first_seen.get(i, 1) > 1)
    if event == "present_from_start":
        return frozenset(i for i in candidates if index.first_seen.get(i) == 1)
    if event == "disappears":
        return frozenset(i for i in candidates if index.last_seen.get(i, duration) < duration)
    if event == "moving":
        return frozenset(i for i in candidates if index.motion.get(i, 0.0) > MOTION_THRESHOLD)
    return frozenset(i for i in candidates if index.motion.get(i, 0.0) <= MOTION_THRESHOLD)


def _relation_survivors(
    index: _TwinIndex, candidates: frozenset[str], relation: str, reference: str, embedder: Any
) -> frozenset[str]:
    relation = relation.strip().lower().replace(" ", "_")
    references = {
        iid for iid in index.instance_ids if _matches(reference, index.description(iid), embedder)
    }
    inverse = RELATION_INVERSE.get(relation)
    survivors = set()
    for candidate in candidates:
        for ref in references:
            if ref == candidate:
                continue
            if (candidate, relation, ref) in index.relation_triples:
                survivors.add(candidate)
            elif inverse and (ref, inverse, candidate) in index.relation_triples:
                survivors.add(candidate)
    return frozenset(survivors)


def _describe(index: _TwinIndex, candidates: frozenset[str]) -> str:
    parts: list[str] = []
    scene = index.scene_text or index.twin.metadata.description.strip()
    if scene:
        parts.append(scene.rstrip(".") + ".")
    ordered = sorted(candidates)
    for iid in ordered:
        description = index.description(iid)
        if description:
            parts.append(f"It shows {description}.")
    wording = {
        "same_distance": "about the same distance away as",
        "in_front": "in front of",
        "behind": "behind",
        "left_of": "to the left of",
        "right_of": "to the right of",
        "above": "above",
        "below": "below",
        "next_to": "next to",
    }
    mentioned = set(ordered)
    for subject, relation, obj in sorted(index.relation_triples):
        if subject in mentioned and obj in mentioned:
            left = index.description(subject) or subject
            right = index.description(obj) or obj
            phrase = wording.get(relation, relation.replace("_", " "))
            parts.append(f"The {left} is {phrase} the {right}.")
    if not parts:
        return "No matching instances are visible."
    return " ".join(parts)


def _answer(index: _TwinIndex, candidates: frozenset[str]) -> str:
    descriptions = [index.description(i) or i for i in sorted(candidates)]
    return "; ".join(descriptions)


def _run_fallback(
    node: OpNode,
    candidates: frozenset[str],
    twin: DigitalTwin,
    client: Optional[ModelClient],
    model: str,
    params: SamplingParams,
) -> frozenset[str]:
    if client is None:
        raise ArgumentError("plan contains llm_fallback nodes but no client was provided")
    prompt = prompts.render(
        "agent",
        "fallback",
        instruction=str(node.params["instruction"]),
        twin=serialize_twin(twin, profile="prompt"),
        candidates=json.dumps(sorted(candidates)),
    )
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    reply, _ = client.chat_structured(request, FALLBACK_SCHEMA)
    survivors = set()
    for iid in reply["instances"]:
        if iid in candidates:
            survivors.add(iid)
        else:
            logger.warning("fallback node %s named unknown instance %r", node.node_id, iid)
    return frozenset(survivors)


def _emit_masks(twin: DigitalTwin, candidates: frozenset[str]) -> MaskSequence:
    frames = {}
    for frame in twin.frames:
        masks = tuple(
            frame.instances[iid].mask
            for iid in sorted(candidates)
            if iid in frame.instances and not frame.instances[iid].mask.is_empty()
        )
        frames[frame.timestamp] = masks
    return MaskSequence(frames=frames)


def _emit_boxes(twin: DigitalTwin, candidates: frozenset[str]) -> BoxSequence:
    frames = {}
    for frame in twin.frames:
        boxes = []
        for iid in sorted(candidates):
            if iid in frame.instances:
                box = mask_bbox(frame.instances[iid].mask)
                if box is not None:
                    boxes.append(box)
        frames[frame.timestamp] = tuple(boxes)
    return BoxSequence(frames=frames)


def execute(
    p: Plan,
    twin: DigitalTwin,
    client: Optional[ModelClient] = None,
    model: str = "",
    embedder: Any = None,
    params: SamplingParams = SamplingParams(),
) -> GroundTruth:
    """Run the graph over the twin and return the task-shaped output.

    Structured nodes are deterministic twin queries; an empty survivor set is
    a valid answer (no instance satisfies the query), never an error.
    """
    problems = validate_plan(p)
    if problems:
        raise ArgumentError("invalid plan: " + "; ".join(problems))
    _check_twin_capabilities(twin, p.required_capabilities)
    order = _topological_order(p.nodes)
    index = _TwinIndex(twin)
    everything = frozenset(index.instance_ids)
    survivors: dict[str, frozenset[str]] = {}
    output: Optional[GroundTruth] = None
    for node in order:
        if node.inputs:
            candidates = frozenset.intersection(*(survivors[i] for i in node.inputs))
        else:
            candidates = everything
        try:
            if node.op == "select_instances_by_attribute":
                result = frozenset(
                    i
                    for i in candidates
                    if _matches(node.params["attribute"], index.description(i), embedder)
                )
            elif node.op == "resolve_part":
                result = frozenset(
                    i
                    for i in candidates
                    if _matches(node.params["part"], index.description(i), embedder)
                )
            elif node.op == "filter_by_spatial_relation":
                result = _relation_survivors(
                    index, candidates, node.params["relation"], node.params["reference"], embedder
                )
            elif node.op == "filter_by_temporal_event":
                result = _temporal_survivors(index, candidates, node.params["event"])
            elif node.op == "llm_fallback":
                result = _run_fallback(node, candidates, twin, client, model, params)
            elif node.op == "emit_masks":
                output = _emit_masks(twin, candidates)
                continue
            elif node.op == "emit_boxes":
                output = _emit_boxes(twin, candidates)
                continue
            elif node.op == "aggregate_describe":
                output = TextAnswer(text=_describe(index, candidates))
                continue
            else:  # answer_question
                output = TextAnswer(text=_answer(index, candidates))
                continue
        except PipelineFault as exc:
            raise ExecutionError(f"node {node.node_id}: {exc}") from exc
        if not result:
            logger.info("node %s left no candidates", node.node_id)
        survivors[node.node_id] = result
    return output


def run_query(
    query: str,
    twin: DigitalTwin,
    client: ModelClient,
    model: str,
    embedder: Any = None,
    params: SamplingParams = SamplingParams(),
) -> tuple[Plan, GroundTruth]:
    """Plan and execute one query against an already-built twin."""
    planned = plan(query, client, model, params=params)
    return planned, execute(
        planned, twin, client=client, model=model, embedder=embedder, params=params
    )
