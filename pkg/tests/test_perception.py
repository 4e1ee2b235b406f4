"""Key-frame scheduling, depth stats, spatial text, features, twin builds."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvtkit.dtcore import DepthStats, InstanceRecord, decode_rle, encode_rle, serialize_twin, validate_twin
from rvtkit.errors import ValidationFailure
from rvtkit.perception import (
    AdapterSet,
    DegenerateMaskError,
    DepthPolarity,
    PerceptionConfig,
    PerceptionError,
    build_digital_twin,
    compute_depth_stats,
    derive_spatial_description,
    extract_visual_features,
    normalize_depth,
    resolve_keyframe_interval,
    schedule_keyframes,
)
from rvtkit.scripted import (
    SceneScript,
    ScriptedFrameSource,
    ScriptedSegmenter,
    SpriteSpec,
    render_frame,
    scripted_adapters,
    sprite_bitmap,
    sprite_rect,
)

import oracles
import twinfab


def drifting_scene(duration=8, video_id="vid01", vanish_second=None):
    return SceneScript(
        video_id=video_id,
        duration=duration,
        resolution=(48, 64),
        instances=(
            SpriteSpec(
                name="ball",
                description="a amber ball drifting right",
                color=(210, 160, 40),
                size=(10, 10),
                start=(4, 8),
                velocity=(2, 0),
                depth=180.0,
            ),
            SpriteSpec(
                name="crate",
                description="a slate crate resting low",
                color=(70, 90, 140),
                size=(12, 12),
                start=(40, 30),
                depth=60.0,
                vanish=vanish_second,
                confidence=0.8,
            ),
        ),
    )


# -- scheduling ----------------------------------------------------------------


def test_keyframe_schedule_fixed_interval():
    assert schedule_keyframes(10, 4) == [1, 5, 9]
    assert schedule_keyframes(10, 1) == list(range(1, 11))
    assert schedule_keyframes(1, 7) == [1]


def test_auto_interval_scales_with_length():
    assert resolve_keyframe_interval("auto", 10) == 1
    assert resolve_keyframe_interval("auto", 320) == 10
    assert resolve_keyframe_interval("auto", 100_000) == 30
    assert resolve_keyframe_interval(6, 100) == 6


def test_config_rejects_bad_values():
    with pytest.raises(ValidationFailure):
        PerceptionConfig(keyframe_interval=0)
    with pytest.raises(ValidationFailure):
        PerceptionConfig(confidence_floor=1.5)
    with pytest.raises(ValidationFailure):
        PerceptionConfig(same_distance_threshold=-1)


# -- depth statistics -------------------------------------------------------------


def test_constant_depth_has_zero_spread():
    depth = np.full((4, 4), 5.0)
    mask = twinfab.square(4, 4, 1, 1, 2)
    stats = compute_depth_stats(depth, mask)
    assert stats.mean == 5.0
    assert stats.std == 0.0


def test_two_pixel_population_stats():
    depth = np.array([[2.0, 4.0]])
    mask = np.array([[1, 1]])
    stats = compute_depth_stats(depth, mask)
    assert stats.mean == 3.0
    assert stats.std == 1.0


def test_depth_stats_match_pixel_scan_oracle():
    for seed in range(500):
        rng = np.random.default_rng(seed)
        depth = rng.integers(0, 256, size=(32, 32)).astype(np.float64)
        mask = (rng.random((32, 32)) < 0.3).astype(np.uint8)
        if not mask.any():
            mask[rng.integers(32), rng.integers(32)] = 1
        stats = compute_depth_stats(depth, mask)
        mean, std = oracles.brute_depth_stats(depth, mask)
        assert stats.mean == mean
        assert stats.std == std


def test_depth_stats_need_pixels():
    with pytest.raises(DegenerateMaskError):
        compute_depth_stats(np.zeros((4, 4)), np.zeros((4, 4)))


def test_depth_normalization():
    assert np.array_equal(normalize_depth(np.array([[0.0, 255.0]])), [[0.0, 255.0]])
    scaled = normalize_depth(np.array([[0.0, 510.0]]))
    assert np.allclose(scaled, [[0.0, 255.0]])


# -- spatial descriptions ----------------------------------------------------------


def _placed_instance(iid, mean, centroid, description="a plain shape"):
    base = twinfab.make_instance(iid, twinfab.square(100, 100, 1, 1, 2), depth_mean=mean)
    return dataclasses.replace(
        base, depth_stats=DepthStats(mean, 1.0), centroid=centroid, description=description
    )


def _relations(mu_a, mu_b, ca=(10.0, 50.0), cb=(90.0, 50.0), polarity=DepthPolarity.LARGER_IS_CLOSER):
    instances = {"a": _placed_instance("a", mu_a, ca), "b": _placed_instance("b", mu_b, cb)}
    text, rels = derive_spatial_description(instances, (100, 100), 10.0, polarity)
    return text, rels


def test_close_depths_read_as_same_distance():
    _, rels = _relations(50.0, 55.0)
    assert ["a", "same_distance", "b"] in [r.to_list() for r in rels]


def test_depth_gap_orders_by_polarity():
    _, rels = _relations(30.0, 80.0)
    assert any(r.subject == "b" and r.relation == "in_front" and r.object == "a" for r in rels)
    _, rels = _relations(30.0, 80.0, polarity=DepthPolarity.SMALLER_IS_CLOSER)
    assert any(r.subject == "a" and r.relation == "in_front" and r.object == "b" for r in rels)


@given(st.floats(0, 255), st.floats(0, 255))
@settings(max_examples=120, deadline=None)
def test_same_distance_fires_exactly_at_threshold(mu_a, mu_b):
    _, rels = _relations(mu_a, mu_b)
    fired = any(r.relation == "same_distance" for r in rels)
    assert fired == (abs(mu_a - mu_b) <= 10.0)


def test_planar_relations_follow_centroids():
    _, rels = _relations(100.0, 100.0, ca=(10.0, 50.0), cb=(90.0, 50.0))
    assert any(r.subject == "a" and r.relation == "left_of" and r.object == "b" for r in rels)
    _, rels = _relations(100.0, 100.0, ca=(50.0, 10.0), cb=(50.0, 90.0))
    assert any(r.subject == "a" and r.relation == "above" and r.object == "b" for r in rels)


def test_near_same_depth_pairs_become_next_to():
    _, rels = _relations(100.0, 102.0, ca=(48.0, 50.0), cb=(56.0, 50.0))
    assert any(r.relation == "next_to" for r in rels)


def test_single_instance_described_by_frame_thirds():
    instances = {"a": _placed_instance("a", 90.0, (12.0, 50.0), "a carved totem")}
    text, rels = derive_spatial_description(instances, (100, 100))
    assert rels == ()
    assert "left third" in text
    assert "a carved totem" in text


def test_spatial_text_is_digit_free():
    text, _ = _relations(30.0, 80.0)
    assert text
    assert not any(ch.isdigit() for ch in text)


def test_spatial_description_requires_depth_stats():
    broken = dataclasses.replace(_placed_instance("a", 50.0, (1.0, 1.0)), depth_stats=None)
    with pytest.raises(PerceptionError):
        derive_spatial_description({"a": broken}, (100, 100))


# -- visual features ------------------------------------------------------------


def test_uniform_color_patch_is_a_single_bin():
    script = SceneScript(
        video_id="v",
        duration=1,
        resolution=(32, 32),
        instances=(
            SpriteSpec(
                name="s", description="flat", color=(200, 30, 30), size=(8, 8),
                start=(4, 4), textured=False,
            ),
        ),
    )
    image = render_frame(script, 1)
    bitmap = sprite_bitmap(script, script.instances[0], 1)
    feats = extract_visual_features(image, bitmap, previous=None)
    assert feats.color_histogram[0][200 // 32] == 1.0
    assert feats.color_histogram[1][30 // 32] == 1.0
    assert feats.motion == (0.0, 0.0)


def test_flow_matches_block_matching_oracle():
    script = SceneScript(
        video_id="v",
        duration=2,
        resolution=(64, 64),
        instances=(
            SpriteSpec(
                name="s", description="textured", color=(200, 60, 60), size=(12, 12),
                start=(10, 20), velocity=(3, 0),
            ),
        ),
    )
    prev, cur = render_frame(script, 1), render_frame(script, 2)
    bitmap = sprite_bitmap(script, script.instances[0], 2)
    feats = extract_visual_features(cur, bitmap, previous=prev)
    oracle = oracles.block_match_flow(prev, cur, bitmap)
    assert oracle == (3.0, 0.0)
    assert abs(feats.motion[0] - oracle[0]) <= 0.5
    assert abs(feats.motion[1] - oracle[1]) <= 0.5
    assert feats.texture > 0


def test_features_need_pixels():
    with pytest.raises(DegenerateMaskError):
        extract_visual_features(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8)))


# -- twin construction -------------------------------------------------------------


def _build(script, interval=4, **kwargs):
    return build_digital_twin(
        ScriptedFrameSource(script),
        PerceptionConfig(keyframe_interval=interval),
        scripted_adapters(script),
        **kwargs,
    )


def test_synthetic_build_is_schema_valid_with_stable_ids():
    script = drifting_scene()
    twin = _build(script)
    assert validate_twin(twin) == []
    assert len(twin.frames) == 8
    assert twin.keyframe_indices == {1, 5}
    for frame in twin.frames:
        assert set(frame.instances) == {"obj_001", "obj_002"}
        assert frame.propagated == (frame.timestamp not in (1, 5))
    assert twin.metadata.description == script.video_description


def test_masks_land_at_scripted_positions():
    script = drifting_scene()
    twin = _build(script)
    spec = script.instances[0]
    for frame in twin.frames:
        expected = sprite_rect(script, spec, frame.timestamp)
        mask = decode_rle(frame.instances["obj_001"].mask)
        got = np.nonzero(mask)
        x0, y0, w, h = expected
        assert got[1].min() == x0 and got[1].max() == x0 + w - 1
        assert got[0].min() == y0 and got[0].max() == y0 + h - 1


def test_confidence_floor_filters_detections():
    script = drifting_scene()
    low = dataclasses.replace(script.instances[1], confidence=0.3)
    script = dataclasses.replace(script, instances=(script.instances[0], low))
    twin = _build(script)
    assert set(twin.frames[0].instances) == {"obj_001"}


def test_empty_detection_set_yields_empty_frames():
    script = SceneScript(video_id="v", duration=3, resolution=(16, 16), instances=())
    twin = _build(script, interval=2)
    assert validate_twin(twin) == []
    assert all(not f.instances for f in twin.frames)


def test_vanished_instance_keeps_id_with_empty_mask():
    script = drifting_scene(vanish_second=2)
    twin = _build(script)
    # crate leaves after frame 2; frames 3-4 still track it with empty masks
    for t in (3, 4):
        inst = twin.frame_at(t).instances["obj_002"]
        assert inst.mask.is_empty()
        assert inst.depth_stats is None
        assert inst.description == "a slate crate resting low"
    # at the next key frame it is no longer detected at all
    assert "obj_002" not in twin.frame_at(5).instances


def test_single_frame_video_builds_without_propagation():
    script = dataclasses.replace(drifting_scene(), duration=1)
    twin = _build(script)
    assert len(twin.frames) == 1
    assert not twin.frames[0].propagated


def test_captions_propagate_between_key_frames():
    script = drifting_scene()
    twin = _build(script)
    key_scene = twin.frame_at(1).scene_description
    for t in (2, 3, 4):
        frame = twin.frame_at(t)
        assert frame.scene_description == key_scene
        assert frame.propagated
        assert frame.instances["obj_001"].description == "a amber ball drifting right"


def test_depth_and_spatial_recomputed_on_propagated_frames():
    script = drifting_scene()
    twin = _build(script)
    frame = twin.frame_at(3)
    inst = frame.instances["obj_001"]
    assert inst.depth_stats is not None and abs(inst.depth_stats.mean - 180.0) < 1e-9
    assert any(r.relation == "in_front" for r in frame.spatial_relations)
    assert frame.spatial_description


def test_video_caption_gets_exactly_the_key_frames():
    script = dataclasses.replace(drifting_scene(), duration=10)
    adapters = scripted_adapters(script)
    build_digital_twin(
        ScriptedFrameSource(script), PerceptionConfig(keyframe_interval=4), adapters
    )
    assert adapters.captioner.video_calls == [[1, 5, 9]]


class _MuteOnceCaptioner:
    """Returns empty text the first N calls of describe_instance."""

    model_id = "mute-once"

    def __init__(self, inner, misses):
        self.inner = inner
        self.misses = misses

    def describe_instance(self, t, image, bitmap):
        if self.misses > 0:
            self.misses -= 1
            return ""
        return self.inner.describe_instance(t, image, bitmap)

    def describe_scene(self, t, image):
        return self.inner.describe_scene(t, image)

    def describe_video(self, images, timestamps):
        return self.inner.describe_video(images, timestamps)


def test_empty_caption_retried_then_placeholder(caplog):
    script = drifting_scene(duration=1)
    adapters = scripted_adapters(script)
    one_miss = dataclasses.replace(
        adapters, captioner=_MuteOnceCaptioner(adapters.captioner, misses=1)
    )
    twin = build_digital_twin(
        ScriptedFrameSource(script), PerceptionConfig(keyframe_interval=1), one_miss
    )
    assert twin.frames[0].instances["obj_001"].description == "a amber ball drifting right"

    always_mute = dataclasses.replace(
        adapters, captioner=_MuteOnceCaptioner(adapters.captioner, misses=10**9)
    )
    with caplog.at_level("WARNING"):
        twin = build_digital_twin(
            ScriptedFrameSource(script), PerceptionConfig(keyframe_interval=1), always_mute
        )
    assert twin.frames[0].instances["obj_001"].description == "unidentified object"
    assert any("placeholder" in r.message for r in caplog.records)


class _FailingSegmenter:
    model_id = "failing-segmenter"

    def __init__(self, inner, fail_at):
        self.inner = inner
        self.fail_at = fail_at
        self.fired = False

    def start_video(self, meta):
        self.inner.start_video(meta)

    def segment(self, t, image):
        if t == self.fail_at and not self.fired:
            self.fired = True
            raise RuntimeError("induced crash")
        return self.inner.segment(t, image)

    def track(self, t, image):
        return self.inner.track(t, image)


def test_adapter_crash_becomes_a_located_fault(tmp_path):
    script = drifting_scene()
    adapters = scripted_adapters(script)
    failing = dataclasses.replace(
        adapters, segmenter=_FailingSegmenter(ScriptedSegmenter(script), fail_at=5)
    )
    with pytest.raises(PerceptionError) as err:
        build_digital_twin(
            ScriptedFrameSource(script), PerceptionConfig(keyframe_interval=4), failing
        )
    assert err.value.frame == 5


def test_resume_after_crash_matches_uninterrupted_build(tmp_path):
    script = drifting_scene()
    baseline = _build(script)
    partial = tmp_path / "vid01.partial.json"

    adapters = scripted_adapters(script)
    failing = dataclasses.replace(
        adapters, segmenter=_FailingSegmenter(ScriptedSegmenter(script), fail_at=5)
    )
    with pytest.raises(PerceptionError):
        build_digital_twin(
            ScriptedFrameSource(script),
            PerceptionConfig(keyframe_interval=4),
            failing,
            partial_path=partial,
        )
    assert partial.is_file()

    resumed = _build(script, partial_path=partial)
    assert serialize_twin(resumed) == serialize_twin(baseline)
    assert not partial.exists()


def test_rebuild_is_deterministic():
    script = drifting_scene()
    assert serialize_twin(_build(script)) == serialize_twin(_build(script))
