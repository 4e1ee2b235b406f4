"""Target-object selection, task typing, and reasoning-tree construction.

The LLM proposes candidates, task types, and entity/relation graphs; this
module validates everything against the twin so downstream ground truth
stays sound: unknown ids are dropped, unjustifiable edges pruned, cycles
repaired once and then rejected.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Optional, Sequence

from .dtcore import (
    ArgumentError,
    DigitalTwin,
    RELATION_INVERSE,
    ReasoningCategory,
    SchemaError,
    TaskType,
)
from .modelio import (
    ChatRequest,
    GenerationError,
    Message,
    ModelClient,
    SamplingParams,
)
from . import prompts
from .dtcore import serialize_twin

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateObject:
    instance_id: str
    rank: int
    rationale: str
    first_seen: int


@dataclass(frozen=True)
class ReasoningNode:
    node_id: str
    entity: str
    attributes: tuple[str, ...] = ()
    is_root: bool = False


@dataclass(frozen=True)
class ReasoningEdge:
    src: str
    dst: str
    kind: ReasoningCategory
    relation: str


@dataclass(frozen=True)
class ReasoningTree:
    nodes: tuple[ReasoningNode, ...]
    edges: tuple[ReasoningEdge, ...]
    root_id: str
    depth: int

    def node(self, node_id: str) -> ReasoningNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class LevelSubtree:
    nodes: tuple[ReasoningNode, ...]
    edges: tuple[ReasoningEdge, ...]
    root_id: str
    depth: int
    level: int

    def edge_kinds(self) -> frozenset[ReasoningCategory]:
        return frozenset(e.kind for e in self.edges)


CANDIDATES_SCHEMA = {
    "type": "object",
    "required": ["candidates"],
    "properties": {
        "candidates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["instance_id"],
                "properties": {
                    "instance_id": {"type": "string"},
                    "rank": {"type": "integer"},
                    "rationale": {"type": "string"},
                },
            },
        }
    },
}

TASK_SCHEMA = {
    "type": "object",
    "required": ["task"],
    "properties": {"task": {"enum": [t.value for t in TaskType]}},
}

TREE_SCHEMA = {
    "type": "object",
    "required": ["nodes", "edges"],
    "properties": {
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["node_id", "entity"],
                "properties": {
                    "node_id": {"type": "string"},
                    "entity": {"type": "string"},
                    "attributes": {"type": "array", "items": {"type": "string"}},
                    "is_root": {"type": "boolean"},
                },
            },
        },
        "edges": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["from", "to", "kind", "relation"],
                "properties": {
                    "from": {"type": "string"},
                    "to": {"type": "string"},
                    "kind": {"enum": [c.value for c in ReasoningCategory]},
                    "relation": {"type": "string"},
                },
            },
        },
    },
}


def _first_appearance(twin: DigitalTwin) -> dict[str, int]:
    seen: dict[str, int] = {}
    for frame in twin.frames:
        for iid in frame.instances:
            seen.setdefault(iid, frame.timestamp)
    return seen


def _ask(
    client: ModelClient,
    model: str,
    prompt: str,
    schema: dict[str, Any],
    params: SamplingParams,
) -> Any:
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    value, _ = client.chat_structured(request, schema)
    return value


def select_objects(
    twin: DigitalTwin,
    n: int,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> list[CandidateObject]:
    """Ranked objects of interest, cross-checked against the twin's ids."""
    if n < 1:
        raise ArgumentError(f"candidate count must be >= 1, got {n}")
    appearances = _first_appearance(twin)
    if not appearances:
        raise GenerationError("cannot select objects from a twin with no instances", [])
    prompt = prompts.render(
        "treegen", "select_objects", twin=serialize_twin(twin, profile="prompt"), n=str(n)
    )
    raw = _ask(client, model, prompt, CANDIDATES_SCHEMA, params)

    picked: list[tuple[int, int, str, str]] = []  # (llm_rank, first_seen, id, rationale)
    seen: set[str] = set()
    for i, entry in enumerate(raw["candidates"]):
        iid = entry["instance_id"]
        if iid not in appearances:
            logger.warning("model proposed unknown instance %r; dropped", iid)
            continue
        if iid in seen:
            continue
        seen.add(iid)
        picked.append((int(entry.get("rank", i + 1)), appearances[iid], iid, entry.get("rationale", "")))
    picked.sort()
    return [
        CandidateObject(instance_id=iid, rank=pos, rationale=why, first_seen=first)
        for pos, (_, first, iid, why) in enumerate(picked[:n], start=1)
    ]


def assign_task_type(
    candidate: CandidateObject,
    twin: DigitalTwin,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> TaskType:
    """One of the four task types; terminal off-vocabulary answers fall back
    to segmentation rather than losing the candidate."""
    description = ""
    for frame in twin.frames:
        inst = frame.instances.get(candidate.instance_id)
        if inst is not None and inst.description:
            description = inst.description
            break
    prompt = prompts.render(
        "treegen",
        "assign_task",
        twin=serialize_twin(twin, profile="prompt"),
        instance_id=candidate.instance_id,
        description=description,
    )
    try:
        raw = _ask(client, model, prompt, TASK_SCHEMA, params)
    except GenerationError:
        logger.warning(
            "task choice for %s never reached the four-type vocabulary; defaulting to segmentation",
            candidate.instance_id,
        )
        return TaskType.SEGMENTATION
    return TaskType(raw["task"])


# -- tree validation ---------------------------------------------------------


def _parse_tree_obj(obj: Any) -> tuple[list[ReasoningNode], list[ReasoningEdge]]:
    nodes = [
        ReasoningNode(
            node_id=n["node_id"],
            entity=n["entity"],
            attributes=tuple(n.get("attributes", ())),
            is_root=bool(n.get("is_root", False)),
        )
        for n in obj["nodes"]
    ]
    edges = [
        ReasoningEdge(
            src=e["from"], dst=e["to"], kind=ReasoningCategory(e["kind"]), relation=e["relation"]
        )
        for e in obj["edges"]
    ]
    return nodes, edges


def _drop_root_incoming(
    nodes: Sequence[ReasoningNode], edges: list[ReasoningEdge]
) -> list[ReasoningEdge]:
    # Root in-degree must be 0; such edges are categorically invalid, so they
    # are pruned before cycle checking rather than bounced through repair.
    roots = [n for n in nodes if n.is_root]
    if len(roots) != 1:
        return edges
    kept = []
    for e in edges:
        if e.dst == roots[0].node_id:
            logger.warning("pruning edge into the root (%s->%s)", e.src, e.dst)
        else:
            kept.append(e)
    return kept


def _structural_problems(
    nodes: Sequence[ReasoningNode], edges: Sequence[ReasoningEdge], root_entity: str
) -> list[str]:
    problems = []
    ids = [n.node_id for n in nodes]
    if len(set(ids)) != len(ids):
        problems.append("duplicate node_id values")
    roots = [n for n in nodes if n.is_root]
    if len(roots) != 1:
        problems.append(f"expected exactly one root node, found {len(roots)}")
    elif roots[0].entity != root_entity:
        problems.append(f"root entity must be {root_entity!r}, found {roots[0].entity!r}")
    known = set(ids)
    for e in edges:
        if e.src not in known or e.dst not in known:
            problems.append(f"edge {e.src}->{e.dst} references unknown nodes")
    if _has_cycle(known, [(e.src, e.dst) for e in edges]):
        problems.append("the edge set contains a cycle")
    return problems


def _has_cycle(node_ids: set[str], arcs: list[tuple[str, str]]) -> bool:
    out: dict[str, list[str]] = {n: [] for n in node_ids}
    indeg = {n: 0 for n in node_ids}
    for a, b in arcs:
        if a in out and b in indeg:
            out[a].append(b)
            indeg[b] += 1
    queue = deque(n for n, d in indeg.items() if d == 0)
    visited = 0
    while queue:
        n = queue.popleft()
        visited += 1
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                queue.append(m)
    return visited != len(node_ids)


def _distances(root: str, node_ids: set[str], edges: Sequence[ReasoningEdge]) -> dict[str, int]:
    adj: dict[str, list[str]] = {n: [] for n in node_ids}
    for e in edges:
        adj[e.src].append(e.dst)
    dist = {root: 0}
    queue = deque([root])
    while queue:
        n = queue.popleft()
        for m in adj[n]:
            if m not in dist:
                dist[m] = dist[n] + 1
                queue.append(m)
    return dist


def _twin_relation_set(twin: DigitalTwin) -> set[tuple[str, str, str]]:
    rels = set()
    for frame in twin.frames:
        for r in frame.spatial_relations:
            rels.add((r.subject, r.relation, r.object))
            rels.add((r.object, RELATION_INVERSE[r.relation], r.subject))
    return rels


def _edge_justified(
    edge: ReasoningEdge,
    by_id: dict[str, ReasoningNode],
    twin_relations: set[tuple[str, str, str]],
    twin_timestamps: int,
) -> bool:
    # Spatial claims must be backed by a recorded relation between the two
    # entities; temporal claims need a multi-frame twin; semantic claims need
    # attribute text on the target node (or an explicit part_of link).
    src, dst = by_id[edge.src], by_id[edge.dst]
    if edge.kind is ReasoningCategory.SPATIAL:
        return (src.entity, edge.relation, dst.entity) in twin_relations
    if edge.kind is ReasoningCategory.TEMPORAL:
        return twin_timestamps >= 2
    return bool(dst.attributes) or edge.relation == "part_of"


def build_reasoning_tree(
    twin: DigitalTwin,
    candidate: CandidateObject,
    client: ModelClient,
    model: str,
    params: SamplingParams = SamplingParams(),
) -> ReasoningTree:
    """LLM-proposed DAG, validated and pruned against the twin."""
    prompt = prompts.render(
        "treegen",
        "build_tree",
        twin=serialize_twin(twin, profile="prompt"),
        instance_id=candidate.instance_id,
    )
    request = ChatRequest(model=model, messages=(Message(role="user", text=prompt),), params=params)
    raw, response = client.chat_structured(request, TREE_SCHEMA)
    nodes, edges = _parse_tree_obj(raw)
    edges = _drop_root_incoming(nodes, edges)
    problems = _structural_problems(nodes, edges, candidate.instance_id)
    if problems:
        repair = request.appended(
            Message(role="assistant", text=response.text),
            Message(
                role="user",
                text=(
                    "That graph is invalid: "
                    + "; ".join(problems)
                    + ". Reply again with one corrected JSON object in the same shape."
                ),
            ),
        )
        raw, _ = client.chat_structured(repair, TREE_SCHEMA)
        nodes, edges = _parse_tree_obj(raw)
        edges = _drop_root_incoming(nodes, edges)
        problems = _structural_problems(nodes, edges, candidate.instance_id)
        if problems:
            raise GenerationError(
                "reasoning tree still invalid after repair: " + "; ".join(problems), [response.text]
            )

    by_id = {n.node_id: n for n in nodes}
    root = next(n for n in nodes if n.is_root)
    twin_relations = _twin_relation_set(twin)
    timestamps = len({f.timestamp for f in twin.frames})
    kept: list[ReasoningEdge] = []
    for e in edges:
        if not _edge_justified(e, by_id, twin_relations, timestamps):
            logger.warning(
                "pruning unjustified %s edge %s-[%s]->%s", e.kind.value, e.src, e.relation, e.dst
            )
            continue
        kept.append(e)

    dist = _distances(root.node_id, set(by_id), kept)
    reachable = [n for n in nodes if n.node_id in dist]
    kept = [e for e in kept if e.src in dist and e.dst in dist]
    depth = max(dist.values())
    if depth < 1:
        raise GenerationError(
            "reasoning tree collapsed to the root after pruning", [response.text]
        )
    return ReasoningTree(nodes=tuple(reachable), edges=tuple(kept), root_id=root.node_id, depth=depth)


def extract_level_subtree(tree: ReasoningTree, level: int) -> LevelSubtree:
    """Nodes within `level` hops of the root, plus the induced edges."""
    if level not in (1, 2, 3, 4):
        raise ArgumentError(f"level must be 1..4, got {level}")
    dist = _distances(tree.root_id, {n.node_id for n in tree.nodes}, tree.edges)
    keep = {n for n, d in dist.items() if d <= level}
    nodes = tuple(n for n in tree.nodes if n.node_id in keep)
    edges = tuple(e for e in tree.edges if e.src in keep and e.dst in keep)
    depth = max(dist[n.node_id] for n in nodes)
    return LevelSubtree(nodes=nodes, edges=edges, root_id=tree.root_id, depth=depth, level=level)


# -- serialization --------------------------------------------------------------


def _graph_to_json(nodes: Sequence[ReasoningNode], edges: Sequence[ReasoningEdge]) -> dict[str, Any]:
    return {
        "nodes": [
            {
                "node_id": n.node_id,
                "entity": n.entity,
                "attributes": list(n.attributes),
                "is_root": n.is_root,
            }
            for n in nodes
        ],
        "edges": [
            {"from": e.src, "to": e.dst, "kind": e.kind.value, "relation": e.relation}
            for e in edges
        ],
    }


def subtree_to_json_obj(subtree: LevelSubtree) -> dict[str, Any]:
    obj = _graph_to_json(subtree.nodes, subtree.edges)
    obj.update({"root_id": subtree.root_id, "depth": subtree.depth, "level": subtree.level})
    return obj


def subtree_from_json_obj(obj: Any) -> LevelSubtree:
    try:
        nodes, edges = _parse_tree_obj(obj)
        return LevelSubtree(
            nodes=tuple(nodes),
            edges=tuple(edges),
            root_id=obj["root_id"],
            depth=int(obj["depth"]),
            level=int(obj["level"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError("subtree", str(exc)) from exc
