"""Query generation, ground-truth extraction, shards, and dataset stats."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import twinfab
from oracles import brute_bbox
from rvtkit.benchgen import (
    DatasetStats,
    ExtractionError,
    QueryRecord,
    assemble_samples,
    compute_dataset_stats,
    extract_ground_truth_masks,
    format_stats_table,
    generate_query,
    generate_text_ground_truth,
    load_shard,
    masks_to_boxes,
    sample_token_count,
    stats_of,
    subtree_elements,
    write_shard,
)
from rvtkit.dtcore import (
    BoxSequence,
    DigitalTwin,
    FrameRecord,
    MaskSequence,
    ReasoningCategory,
    RVTSample,
    SchemaError,
    SpatialRelation,
    TaskType,
    TextAnswer,
    VideoMeta,
    ArgumentError,
    encode_rle,
    validate_sample,
)
from rvtkit.errors import ValidationFailure
from rvtkit.modelio import ClientConfig, GenerationError, ModelClient
from rvtkit.treegen import CandidateObject, LevelSubtree, ReasoningEdge, ReasoningNode
from scripted_llm import ScriptedTransport

# -- fixtures -------------------------------------------------------------------


def make_client(rules=(), default=None):
    transport = ScriptedTransport(rules=rules, default=default)
    client = ModelClient(config=ClientConfig(), transport=transport, sleeper=lambda s: None)
    return client, transport


def clean_twin() -> DigitalTwin:
    """Two squares with id-free descriptions: an amber ball above a slate crate."""
    h, w = 8, 8
    frames = []
    for t in (1, 2, 3, 4):
        instances = {
            "obj_001": twinfab.make_instance(
                "obj_001", twinfab.square(h, w, 1, 1, 2), description="an amber ball"
            ),
            "obj_002": twinfab.make_instance(
                "obj_002", twinfab.square(h, w, 1, 4, 2), description="a slate crate"
            ),
        }
        frames.append(
            FrameRecord(
                timestamp=t,
                scene_description=f"frame {t}",
                spatial_description="the ball sits above the crate",
                spatial_relations=(SpatialRelation("obj_001", "above", "obj_002"),),
                instances=instances,
                propagated=t != 1,
            )
        )
    meta = VideoMeta(
        video_id="vid01",
        description="a ball hovering above a crate",
        duration=4,
        resolution=(h, w),
        fps=10.0,
        source="synthetic",
    )
    return DigitalTwin(metadata=meta, frames=tuple(frames), keyframe_indices=frozenset({1}))


def chain_subtree(level: int = 1, with_part: bool = False) -> LevelSubtree:
    nodes = [
        ReasoningNode("n1", "obj_001", is_root=True),
        ReasoningNode("n2", "obj_002", attributes=("slate colored",)),
    ]
    edges = [ReasoningEdge("n1", "n2", ReasoningCategory.SPATIAL, "above")]
    depth = 1
    if with_part:
        nodes.append(ReasoningNode("n3", "lid of the crate"))
        edges.append(ReasoningEdge("n2", "n3", ReasoningCategory.SEMANTIC, "part_of"))
        depth = 2
    return LevelSubtree(
        nodes=tuple(nodes), edges=tuple(edges), root_id="n1", depth=depth, level=level
    )


def candidate(iid: str = "obj_001") -> CandidateObject:
    return CandidateObject(instance_id=iid, rank=1, rationale="", first_seen=1)


CLEAN_QUERY = "Segment the amber ball above the slate crate"


def query_reply(query: str = CLEAN_QUERY, categories=("spatial", "semantic")) -> str:
    return json.dumps({"query": query, "categories": list(categories)})


def approve_all(request) -> str:
    """Checklist stand-in that confirms every element listed in the prompt."""
    text = request.messages[-1].text
    elements, _ = json.JSONDecoder().raw_decode(text[text.index("[") :])
    return json.dumps({"checks": [{"element": e, "ok": True} for e in elements]})


def reject(*bad_elements: str):
    def reply(request) -> str:
        text = request.messages[-1].text
        elements, _ = json.JSONDecoder().raw_decode(text[text.index("[") :])
        return json.dumps(
            {"checks": [{"element": e, "ok": e not in bad_elements} for e in elements]}
        )

    return reply


QUERY_NEEDLE = "Write one natural-language query"
CHECKLIST_NEEDLE = "auditing one benchmark query"
REGEN_NEEDLE = "The query failed validation"
TEXT_NEEDLE = "writing the reference text"
TEXT_RETRY_NEEDLE = "empty or too short"


# -- QueryRecord ------------------------------------------------------------------


def test_query_record_rejects_bad_fields():
    cats = frozenset({ReasoningCategory.SEMANTIC})
    with pytest.raises(ArgumentError):
        QueryRecord(query="  ", categories=cats, level=1)
    with pytest.raises(ArgumentError):
        QueryRecord(query="Segment it", categories=frozenset(), level=1)
    with pytest.raises(ArgumentError):
        QueryRecord(query="Segment it", categories=cats, level=5)


# -- subtree elements ----------------------------------------------------------------


def test_elements_resolve_ids_to_descriptions():
    twin = clean_twin()
    elements = subtree_elements(twin, chain_subtree())
    assert elements == ["an amber ball", "a slate crate", "slate colored", "above"]


def test_elements_include_derived_entities_and_relations():
    twin = clean_twin()
    elements = subtree_elements(twin, chain_subtree(with_part=True))
    assert "lid of the crate" in elements
    assert "part of" in elements


def test_elements_never_carry_instance_ids():
    # twinfab's default descriptions embed the raw id; such names are unusable.
    twin = twinfab.make_twin()
    elements = subtree_elements(twin, chain_subtree())
    assert elements == ["slate colored", "above"]


# -- generate_query -------------------------------------------------------------------


def test_query_happy_path():
    twin = clean_twin()
    client, transport = make_client(
        rules=[(QUERY_NEEDLE, query_reply()), (CHECKLIST_NEEDLE, approve_all)]
    )
    record = generate_query(
        twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
    )
    assert record.query == CLEAN_QUERY
    assert record.level == 1
    assert len(transport.chat_calls) == 2


def test_categories_intersect_edge_kinds_with_self_report():
    # The chain uses only a spatial edge, so the self-reported "semantic" drops out.
    twin = clean_twin()
    client, _ = make_client(
        rules=[(QUERY_NEEDLE, query_reply()), (CHECKLIST_NEEDLE, approve_all)]
    )
    record = generate_query(
        twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
    )
    assert record.categories == frozenset({ReasoningCategory.SPATIAL})
    assert ReasoningCategory.TEMPORAL not in record.categories


def test_empty_intersection_falls_back_to_semantic():
    twin = clean_twin()
    client, _ = make_client(
        rules=[
            (QUERY_NEEDLE, query_reply(categories=("temporal",))),
            (CHECKLIST_NEEDLE, approve_all),
        ]
    )
    record = generate_query(
        twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
    )
    assert record.categories == frozenset({ReasoningCategory.SEMANTIC})


def test_id_leak_triggers_regeneration():
    twin = clean_twin()
    client, transport = make_client(
        rules=[
            (REGEN_NEEDLE, query_reply()),
            (QUERY_NEEDLE, query_reply(query="Segment obj_001 above the crate")),
            (CHECKLIST_NEEDLE, approve_all),
        ]
    )
    record = generate_query(
        twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
    )
    assert record.query == CLEAN_QUERY
    # First attempt short-circuits on the leak, so: query, regeneration, checklist.
    assert len(transport.chat_calls) == 3
    assert "instance ids" in transport.chat_calls[1].messages[-1].text


def test_persistent_id_leak_skips_sample(caplog):
    twin = clean_twin()
    leaky = query_reply(query="Segment obj_001 now")
    client, _ = make_client(rules=[(REGEN_NEEDLE, leaky), (QUERY_NEEDLE, leaky)])
    with caplog.at_level("WARNING"):
        record = generate_query(
            twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
        )
    assert record is None
    assert any("skipped" in r.message for r in caplog.records)


def test_checklist_rejection_regenerates_then_passes():
    twin = clean_twin()
    verdicts = iter([reject("slate colored"), approve_all])
    client, transport = make_client(
        rules=[
            (REGEN_NEEDLE, query_reply()),
            (QUERY_NEEDLE, query_reply(query="Segment the amber ball")),
            (CHECKLIST_NEEDLE, lambda req: next(verdicts)(req)),
        ]
    )
    record = generate_query(
        twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
    )
    assert record.query == CLEAN_QUERY
    # query, checklist (rejects), regeneration, checklist (passes)
    assert len(transport.chat_calls) == 4
    assert "slate colored" in transport.chat_calls[2].messages[-1].text


def test_persistent_checklist_rejection_skips(caplog):
    twin = clean_twin()
    client, _ = make_client(
        rules=[
            (REGEN_NEEDLE, query_reply()),
            (QUERY_NEEDLE, query_reply()),
            (CHECKLIST_NEEDLE, reject("above")),
        ]
    )
    with caplog.at_level("WARNING"):
        record = generate_query(
            twin, candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
        )
    assert record is None


def test_subtree_level_must_match():
    client, _ = make_client(default="{}")
    with pytest.raises(ArgumentError):
        generate_query(
            clean_twin(), candidate(), TaskType.SEGMENTATION, chain_subtree(level=2), 1, client, "m"
        )


def test_subtree_must_be_rooted_at_candidate():
    client, _ = make_client(default="{}")
    with pytest.raises(ArgumentError):
        generate_query(
            clean_twin(), candidate("obj_002"), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
        )


def test_terminal_parse_failure_raises():
    client, _ = make_client(default="not json at all")
    with pytest.raises(GenerationError):
        generate_query(
            clean_twin(), candidate(), TaskType.SEGMENTATION, chain_subtree(), 1, client, "m"
        )


# -- ground-truth masks ---------------------------------------------------------------


def test_extracted_masks_copy_the_twin():
    twin = clean_twin()
    seq = extract_ground_truth_masks(twin, "obj_001", chain_subtree())
    assert sorted(seq.frames) == [1, 2, 3, 4]
    for frame in twin.frames:
        assert seq.frames[frame.timestamp] == (frame.instances["obj_001"].mask,)


def test_absent_frames_become_empty_entries():
    h, w = 8, 8
    frames = []
    for t in (1, 2, 3, 4):
        instances = {
            "obj_002": twinfab.make_instance("obj_002", twinfab.square(h, w, 1, 4, 2))
        }
        if t <= 2:
            instances["obj_001"] = twinfab.make_instance(
                "obj_001", twinfab.square(h, w, 1, 1, 2)
            )
        frames.append(
            FrameRecord(
                timestamp=t,
                scene_description="s",
                spatial_description="s",
                instances=instances,
            )
        )
    twin = DigitalTwin(
        metadata=VideoMeta("vid02", "twin", 4, (h, w), 10.0, "synthetic"),
        frames=tuple(frames),
        keyframe_indices=frozenset({1}),
    )
    seq = extract_ground_truth_masks(twin, "obj_001", chain_subtree())
    assert seq.frames[1] != () and seq.frames[2] != ()
    assert seq.frames[3] == () and seq.frames[4] == ()


def test_derived_root_is_an_extraction_error():
    subtree = LevelSubtree(
        nodes=(ReasoningNode("n1", "lid of the crate", is_root=True),),
        edges=(),
        root_id="n1",
        depth=0,
        level=1,
    )
    with pytest.raises(ExtractionError):
        extract_ground_truth_masks(clean_twin(), "obj_001", subtree)


def test_root_must_match_target_instance():
    with pytest.raises(ExtractionError):
        extract_ground_truth_masks(clean_twin(), "obj_002", chain_subtree())


# -- masks_to_boxes -------------------------------------------------------------------


def test_tight_box_from_pinned_pixels():
    bitmap = np.zeros((10, 10), dtype=np.uint8)
    bitmap[3:8, 2:6] = 1  # x 2..5, y 3..7
    boxes = masks_to_boxes(MaskSequence(frames={1: (encode_rle(bitmap),)}))
    assert boxes.frames == {1: ((2, 3, 4, 5),)}


def test_empty_masks_yield_no_boxes():
    empty = encode_rle(np.zeros((4, 4), dtype=np.uint8))
    boxes = masks_to_boxes(MaskSequence(frames={1: (), 2: (empty,)}))
    assert boxes.frames == {1: (), 2: ()}


def test_boxes_match_bruteforce_scan():
    frames = {}
    bitmaps = {}
    for seed in range(500):
        rng = np.random.default_rng(seed)
        bitmap = (rng.random((16, 16)) < rng.uniform(0.02, 0.5)).astype(np.uint8)
        bitmaps[seed] = bitmap
        frames[seed] = (encode_rle(bitmap),)
    boxes = masks_to_boxes(MaskSequence(frames=frames))
    for seed, bitmap in bitmaps.items():
        expected = brute_bbox(bitmap.tolist())
        got = boxes.frames[seed]
        assert got == ((expected,) if expected is not None else ())


# -- text ground truth -----------------------------------------------------------------


def record_for(query: str = CLEAN_QUERY) -> QueryRecord:
    return QueryRecord(
        query=query, categories=frozenset({ReasoningCategory.SEMANTIC}), level=1
    )


def test_vqa_answer_stored_verbatim():
    answer = "The ball sits above the crate."
    client, _ = make_client(rules=[(TEXT_NEEDLE, answer)])
    text = generate_text_ground_truth(clean_twin(), record_for(), TaskType.VQA, client, "m")
    assert text == answer


def test_vqa_overlong_answer_truncated():
    client, _ = make_client(rules=[(TEXT_NEEDLE, "word " * 130)])
    text = generate_text_ground_truth(clean_twin(), record_for(), TaskType.VQA, client, "m")
    assert len(text.split()) == 120


def test_summary_bounds_enforced():
    client, _ = make_client(rules=[(TEXT_NEEDLE, "word " * 230)])
    text = generate_text_ground_truth(clean_twin(), record_for(), TaskType.SUMMARY, client, "m")
    assert len(text.split()) == 200


def test_short_summary_retries_then_succeeds():
    long_enough = ("the ball drifts " * 20).strip()
    client, transport = make_client(
        rules=[(TEXT_RETRY_NEEDLE, long_enough), (TEXT_NEEDLE, "too short")]
    )
    text = generate_text_ground_truth(clean_twin(), record_for(), TaskType.SUMMARY, client, "m")
    assert text == long_enough
    assert len(transport.chat_calls) == 2


def test_persistently_short_summary_skips(caplog):
    client, _ = make_client(rules=[(TEXT_RETRY_NEEDLE, "still short"), (TEXT_NEEDLE, "short")])
    with caplog.at_level("WARNING"):
        text = generate_text_ground_truth(
            clean_twin(), record_for(), TaskType.SUMMARY, client, "m"
        )
    assert text is None
    assert any("skipped" in r.message for r in caplog.records)


def test_empty_answer_retries_once():
    client, transport = make_client(rules=[(TEXT_RETRY_NEEDLE, "A fine answer."), (TEXT_NEEDLE, "")])
    text = generate_text_ground_truth(clean_twin(), record_for(), TaskType.VQA, client, "m")
    assert text == "A fine answer."
    assert len(transport.chat_calls) == 2


def test_mask_tasks_get_no_text_ground_truth():
    client, _ = make_client(default="x")
    with pytest.raises(ArgumentError):
        generate_text_ground_truth(
            clean_twin(), record_for(), TaskType.SEGMENTATION, client, "m"
        )


# -- assemble_samples -------------------------------------------------------------------


CHAIN_TREE_REPLY = json.dumps(
    {
        "nodes": [
            {"node_id": "n1", "entity": "obj_001", "attributes": [], "is_root": True},
            {"node_id": "n2", "entity": "obj_002", "attributes": ["slate colored"]},
            {"node_id": "n3", "entity": "lid of the crate", "attributes": []},
        ],
        "edges": [
            {"from": "n1", "to": "n2", "kind": "spatial", "relation": "above"},
            {"from": "n2", "to": "n3", "kind": "semantic", "relation": "part_of"},
        ],
    }
)


def pipeline_rules(task: str) -> list:
    return [
        ("Choose exactly one task type", json.dumps({"task": task})),
        ("Construct a directed acyclic graph", CHAIN_TREE_REPLY),
        (REGEN_NEEDLE, query_reply()),
        (QUERY_NEEDLE, query_reply()),
        (CHECKLIST_NEEDLE, approve_all),
        (TEXT_RETRY_NEEDLE, "A fine answer about the ball."),
        (TEXT_NEEDLE, "The amber ball stays above the slate crate throughout."),
    ]


@pytest.mark.parametrize(
    "task,kind",
    [("segmentation", "masks"), ("grounding", "boxes"), ("vqa", "text")],
)
def test_assemble_emits_all_four_levels(task, kind):
    twin = clean_twin()
    client, _ = make_client(rules=pipeline_rules(task))
    samples = assemble_samples(twin, [candidate()], client, "m")
    assert [s.level for s in samples] == [1, 2, 3, 4]
    assert [s.sample_id for s in samples] == [f"vid01-obj_001-l{k}" for k in (1, 2, 3, 4)]
    for sample in samples:
        assert sample.ground_truth.kind == kind
        assert sample.task.value == task
        assert sample.subtree_ref["level"] == sample.level
        assert not validate_sample(
            sample, resolution=twin.metadata.resolution, known_instance_ids=twin.instance_ids()
        )


def test_assemble_categories_follow_subtree_growth():
    # Level 1 keeps only the spatial hop; deeper levels add the semantic part edge.
    twin = clean_twin()
    client, _ = make_client(rules=pipeline_rules("segmentation"))
    samples = assemble_samples(twin, [candidate()], client, "m")
    by_level = {s.level: s.categories for s in samples}
    assert by_level[1] == frozenset({ReasoningCategory.SPATIAL})
    assert by_level[2] == frozenset({ReasoningCategory.SPATIAL, ReasoningCategory.SEMANTIC})


def test_assemble_skips_candidate_without_a_tree(caplog):
    twin = clean_twin()
    client, _ = make_client(default="never valid json")
    with caplog.at_level("WARNING"):
        samples = assemble_samples(twin, [candidate()], client, "m")
    assert samples == []
    assert any("candidate skipped" in r.message for r in caplog.records)


# -- shards -------------------------------------------------------------------------------


def assembled_samples() -> list[RVTSample]:
    client, _ = make_client(rules=pipeline_rules("segmentation"))
    return assemble_samples(clean_twin(), [candidate()], client, "m")


def test_shard_round_trip(tmp_path):
    samples = assembled_samples()
    path = write_shard(samples, tmp_path / "shards" / "rvt-test.jsonl")
    assert load_shard(path) == samples


def test_shard_bytes_are_deterministic(tmp_path):
    samples = assembled_samples()
    a = write_shard(samples, tmp_path / "a.jsonl").read_bytes()
    b = write_shard(samples, tmp_path / "b.jsonl").read_bytes()
    assert a == b


def test_shard_refuses_out_of_range_level(tmp_path):
    bad = dataclasses.replace(assembled_samples()[0], level=5)
    with pytest.raises(SchemaError):
        write_shard([bad], tmp_path / "bad.jsonl")


def test_shard_refuses_duplicate_ids(tmp_path):
    sample = assembled_samples()[0]
    with pytest.raises(SchemaError):
        write_shard([sample, sample], tmp_path / "dup.jsonl")


def test_load_rejects_garbage_lines(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text("this is not json\n", encoding="utf-8")
    with pytest.raises(SchemaError) as err:
        load_shard(path)
    assert "broken.jsonl:1" in str(err.value)


def test_load_missing_shard_fails_cleanly(tmp_path):
    with pytest.raises(ValidationFailure):
        load_shard(tmp_path / "nowhere.jsonl")


# -- dataset stats ---------------------------------------------------------------------


def stub_sample(
    sid: str,
    level: int = 1,
    task: TaskType = TaskType.SEGMENTATION,
    cats=("semantic",),
    query: str = "a b c",
    answer: str | None = None,
    video: str = "vid01",
) -> RVTSample:
    if task in (TaskType.SUMMARY, TaskType.VQA):
        gt = TextAnswer(text=answer or "")
    elif task is TaskType.GROUNDING:
        gt = BoxSequence(frames={1: ((0, 0, 2, 2),)})
    else:
        gt = MaskSequence(frames={1: (encode_rle(twinfab.square(8, 8, 0, 0, 2)),)})
    return RVTSample(
        sample_id=sid,
        video_id=video,
        task=task,
        query=query,
        categories=frozenset(ReasoningCategory(c) for c in cats),
        level=level,
        ground_truth=gt,
        target_instance_id="obj_001",
    )


def test_level_shares_from_pinned_counts():
    stats = stats_of(
        [
            stub_sample("s1", level=1, query="a b c"),
            stub_sample("s2", level=4, query="a b c d e"),
        ]
    )
    assert stats.totals == {"queries": 2, "tokens": 8}
    assert stats.by_level == {1: 37.5, 4: 62.5}
    assert stats.by_task == {"segmentation": 100.0}
    assert stats.by_category == {"semantic": 100.0}
    assert stats.per_video == {"vid01": 2}


def test_text_ground_truth_counts_toward_tokens():
    sample = stub_sample("s1", task=TaskType.VQA, query="a b c", answer="one two three four five")
    assert sample_token_count(sample) == 8
    assert stats_of([sample]).totals["tokens"] == 8


def test_multi_category_tokens_normalize_within_grouping():
    stats = stats_of(
        [
            stub_sample("s1", cats=("semantic", "spatial"), query="a b c d"),
            stub_sample("s2", cats=("semantic",), query="e f g h"),
        ]
    )
    assert stats.by_category == {"semantic": 66.67, "spatial": 33.33}
    assert abs(sum(stats.by_category.values()) - 100.0) <= 0.05


def test_absent_groupings_are_omitted():
    stats = stats_of([stub_sample("s1")])
    assert "temporal" not in stats.by_category
    assert "vqa" not in stats.by_task
    assert list(stats.by_level) == [1]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(min_value=1, max_value=4),
            st.sampled_from(list(TaskType)),
            st.sets(st.sampled_from(list(ReasoningCategory)), min_size=1),
            st.integers(min_value=1, max_value=40),
        ),
        min_size=1,
        max_size=30,
    )
)
def test_every_grouping_sums_to_one_hundred(rows):
    samples = [
        stub_sample(
            f"s{i}",
            level=level,
            task=task,
            cats=tuple(c.value for c in cats),
            query="w " * n,
            answer="x" if task in (TaskType.SUMMARY, TaskType.VQA) else None,
        )
        for i, (level, task, cats, n) in enumerate(rows)
    ]
    stats = stats_of(samples)
    for grouping in (stats.by_level, stats.by_task, stats.by_category):
        assert grouping
        assert abs(sum(grouping.values()) - 100.0) <= 0.05


def test_stats_survive_the_shard_round_trip(tmp_path):
    samples = assembled_samples()
    path = write_shard(samples, tmp_path / "rvt-test.jsonl")
    assert compute_dataset_stats([path]) == stats_of(samples)


def test_stats_need_at_least_one_shard():
    with pytest.raises(ArgumentError):
        compute_dataset_stats([])


def test_stats_table_is_readable():
    stats = stats_of(
        [
            stub_sample("s1", level=1, query="a b c"),
            stub_sample("s2", level=4, query="a b c d e"),
        ]
    )
    table = format_stats_table(stats)
    assert "37.50%" in table and "62.50%" in table
    assert "level 1" in table and "level 4" in table
    # absent groupings are omitted outright, never shown as 0.00% rows
    assert "temporal" not in table and "vqa" not in table and "  0.00%" not in table
    assert isinstance(stats, DatasetStats)
