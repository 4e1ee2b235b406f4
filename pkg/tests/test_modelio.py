"""Client plumbing: digests, transcripts, retries, structured parsing."""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from rvtkit.errors import ValidationFailure
from rvtkit.modelio import (
    ChatRequest,
    ClientConfig,
    DeterminismError,
    GenerationError,
    HashEmbedder,
    Message,
    ModelClient,
    SamplingParams,
    ServiceError,
    StructuredParseError,
    Transcript,
    TransportError,
    chat_digest,
    cosine,
    extract_json_object,
    parse_structured,
)

from scripted_llm import FlakyTransport, ScriptedTransport

QUERY_SCHEMA = {
    "type": "object",
    "required": ["query", "categories"],
    "properties": {
        "query": {"type": "string"},
        "categories": {
            "type": "array",
            "items": {"enum": ["semantic", "spatial", "temporal"]},
        },
    },
}


def _request(text="hello", **params):
    return ChatRequest(
        model="test-model",
        messages=(Message(role="user", text=text),),
        params=SamplingParams(**params),
    )


def _client(transport=None, transcript=None, **cfg):
    slept = []
    client = ModelClient(
        config=ClientConfig(**cfg),
        transcript=transcript,
        transport=transport,
        sleeper=slept.append,
    )
    return client, slept


# -- request shape -------------------------------------------------------------


def test_sampling_defaults():
    params = SamplingParams()
    assert params.temperature == 0.7
    assert params.top_p == 0.95


def test_request_validation():
    with pytest.raises(ValidationFailure):
        ChatRequest(model="m", messages=())
    with pytest.raises(ValidationFailure):
        ChatRequest(model="m", messages=(Message(role="assistant", text="hi"),))
    with pytest.raises(ValidationFailure):
        SamplingParams(top_p=0.0)


# -- digests --------------------------------------------------------------------


def test_identical_requests_share_a_digest():
    assert chat_digest(_request()) == chat_digest(_request())


def test_any_edit_changes_the_digest():
    base = _request()
    seen = {chat_digest(base)}
    for variant in (
        _request("hello."),
        _request(temperature=0.8),
        _request(top_p=0.9),
        _request(max_tokens=2048),
        _request(seed=7),
        dataclasses.replace(base, model="other-model"),
        ChatRequest(model="test-model", messages=(Message(role="system", text="hello"),)),
        ChatRequest(
            model="test-model", messages=(Message(role="user", text="hello", images=(b"\x89PNG",)),)
        ),
    ):
        d = chat_digest(variant)
        assert d not in seen
        seen.add(d)


def test_no_collisions_over_perturbed_fixtures():
    digests = {chat_digest(_request(f"prompt {i}")) for i in range(10_000)}
    assert len(digests) == 10_000


# -- transcripts ------------------------------------------------------------------


def test_record_then_replay_round_trip(tmp_path):
    path = tmp_path / "run.jsonl"
    recorder = Transcript(path, "record")
    client, _ = _client(ScriptedTransport(default="recorded answer"), transcript=recorder)
    live = client.chat(_request())

    replayer = Transcript(path, "replay")
    replay_client, _ = _client(transcript=replayer)
    assert replay_client.transport is None
    assert replay_client.chat(_request()) == live


def test_transcript_lines_are_self_describing(tmp_path):
    path = tmp_path / "run.jsonl"
    client, _ = _client(ScriptedTransport(default="ok"), transcript=Transcript(path, "record"))
    client.chat(_request())
    entry = json.loads(path.read_text().splitlines()[0])
    assert set(entry) == {"digest", "request", "response", "wall_time"}
    assert entry["digest"] == chat_digest(_request())


def test_replay_miss_is_a_determinism_error(tmp_path):
    path = tmp_path / "run.jsonl"
    client, _ = _client(ScriptedTransport(default="ok"), transcript=Transcript(path, "record"))
    client.chat(_request())

    replay_client, _ = _client(transcript=Transcript(path, "replay"))
    missing = _request("never recorded")
    with pytest.raises(DeterminismError) as err:
        replay_client.chat(missing)
    assert chat_digest(missing) in str(err.value)


def test_replay_serves_duplicate_digests_in_order(tmp_path):
    path = tmp_path / "run.jsonl"
    replies = iter(["first", "second"])
    transport = ScriptedTransport(rules=[("hello", lambda req: next(replies))])
    client, _ = _client(transport, transcript=Transcript(path, "record"))
    client.chat(_request())
    client.chat(_request())

    replay_client, _ = _client(transcript=Transcript(path, "replay"))
    texts = [replay_client.chat(_request()).text for _ in range(4)]
    assert texts == ["first", "second", "second", "second"]


def test_missing_replay_file_fails_fast(tmp_path):
    with pytest.raises(ValidationFailure):
        Transcript(tmp_path / "absent.jsonl", "replay")


# -- retries ------------------------------------------------------------------


def test_transient_failures_are_retried_with_backoff():
    transport = FlakyTransport(ScriptedTransport(default="ok"), failures=2)
    client, slept = _client(transport, backoff_base=0.5)
    assert client.chat(_request()).text == "ok"
    assert transport.attempts == 3
    assert slept == [0.5, 1.0]


def test_retries_are_bounded():
    transport = FlakyTransport(ScriptedTransport(default="ok"), failures=5)
    client, _ = _client(transport, max_attempts=3)
    with pytest.raises(TransportError):
        client.chat(_request())
    assert transport.attempts == 3


def test_service_errors_are_not_retried():
    transport = FlakyTransport(ScriptedTransport(default="ok"), failures=5, hard=True)
    client, _ = _client(transport)
    with pytest.raises(ServiceError) as err:
        client.chat(_request())
    assert transport.attempts == 1
    assert err.value.status == 400


# -- embeddings -----------------------------------------------------------------


def test_embeddings_are_unit_norm_and_deterministic(tmp_path):
    path = tmp_path / "run.jsonl"
    client, _ = _client(ScriptedTransport(), transcript=Transcript(path, "record"))
    first = client.embed(["a"])
    replay_client, _ = _client(transcript=Transcript(path, "replay"))
    assert replay_client.embed(["a"]) == first
    for vec in first:
        assert abs(cosine(vec, vec) - 1.0) < 1e-9
        assert abs(float(np.linalg.norm(vec)) - 1.0) < 1e-9


def test_hash_embedder_is_stable_per_token():
    emb = HashEmbedder(dim=64)
    a1, a2 = emb.embed(["ball"]), emb.embed(["ball"])
    assert a1 == a2
    b = emb.embed(["cube"])
    assert cosine(a1[0], b[0]) < 0.9
    with pytest.raises(ValidationFailure):
        emb.embed([])


# -- structured parsing ------------------------------------------------------------


def test_parse_structured_accepts_embedded_object():
    text = 'Sure! {"query":"the red one","categories":["semantic"]} hope that helps'
    value = parse_structured(text, QUERY_SCHEMA)
    assert value["query"] == "the red one"


def test_parse_structured_ignores_trailing_prose():
    value = parse_structured('{"query":"q","categories":[]}\nanything else', QUERY_SCHEMA)
    assert value["categories"] == []


def test_parse_structured_rejects_shape_mismatch():
    with pytest.raises(StructuredParseError):
        parse_structured('{"query":42,"categories":[]}', QUERY_SCHEMA)
    with pytest.raises(StructuredParseError):
        parse_structured("no json here", QUERY_SCHEMA)


def test_extract_json_object_skips_false_starts():
    assert extract_json_object('{oops} later {"a":1}') == {"a": 1}


def test_repair_round_trip_fixes_one_bad_reply():
    replies = iter(["not json at all", '{"query":"fixed","categories":["spatial"]}'])
    transport = ScriptedTransport(default=None, rules=[("", lambda req: next(replies))])
    client, _ = _client(transport)
    value, _ = client.chat_structured(_request("make a query"), QUERY_SCHEMA)
    assert value["query"] == "fixed"
    assert len(transport.chat_calls) == 2
    repair_prompt = transport.chat_calls[1].messages[-1].text
    assert "could not be parsed" in repair_prompt


def test_second_failure_is_terminal_and_replayable(tmp_path):
    path = tmp_path / "run.jsonl"
    replies = iter(["bad one", "bad two"])
    transport = ScriptedTransport(default=None, rules=[("", lambda req: next(replies))])
    client, _ = _client(transport, transcript=Transcript(path, "record"))
    with pytest.raises(GenerationError) as err:
        client.chat_structured(_request("make a query"), QUERY_SCHEMA)
    assert err.value.raw_texts == ("bad one", "bad two")

    replay_client, _ = _client(transcript=Transcript(path, "replay"))
    with pytest.raises(GenerationError) as err2:
        replay_client.chat_structured(_request("make a query"), QUERY_SCHEMA)
    assert err2.value.raw_texts == ("bad one", "bad two")
