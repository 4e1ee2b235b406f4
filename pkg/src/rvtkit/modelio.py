"""Model-service clients: chat completions and embeddings over an
OpenAI-compatible wire protocol, with record/replay transcripts so every
pipeline stage can be re-run bit-for-bit without network access.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import requests

from .errors import PipelineFault, ValidationFailure

logger = logging.getLogger(__name__)

RETRYABLE_STATUSES = {429, 500, 502, 503, 504}


class DeterminismError(PipelineFault):
    """Replay-mode request whose digest was never recorded."""


class TransportError(PipelineFault):
    """Transient transport failures survived every retry."""


class ServiceError(PipelineFault):
    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"service returned {status}: {body[:200]}")
        self.status = status
        self.body = body


class GenerationError(PipelineFault):
    """Structured output still unparseable after the repair round-trip."""

    def __init__(self, message: str, raw_texts: Sequence[str]) -> None:
        super().__init__(message)
        self.raw_texts = tuple(raw_texts)


class StructuredParseError(PipelineFault):
    pass


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    OTHER = "other"

    @classmethod
    def from_wire(cls, value: Any) -> "FinishReason":
        try:
            return cls(str(value))
        except ValueError:
            return cls.OTHER


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValidationFailure(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValidationFailure(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens < 1:
            raise ValidationFailure(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    images: tuple[bytes, ...] = ()


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    params: SamplingParams = SamplingParams()

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValidationFailure("chat request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValidationFailure(
                f"first message role must be system or user, got {self.messages[0].role!r}"
            )

    def appended(self, *messages: Message) -> "ChatRequest":
        return ChatRequest(self.model, self.messages + messages, self.params)


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage = Usage()
    finish_reason: FinishReason = FinishReason.STOP


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _digest_of(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def chat_digest(request: ChatRequest) -> str:
    """Content hash of a chat request; images enter by their own hash."""
    return _digest_of(
        {
            "kind": "chat",
            "model": request.model,
            "messages": [
                {
                    "role": m.role,
                    "text": m.text,
                    "images": [hashlib.sha256(img).hexdigest() for img in m.images],
                }
                for m in request.messages
            ],
            "params": {
                "temperature": request.params.temperature,
                "top_p": request.params.top_p,
                "max_tokens": request.params.max_tokens,
                "seed": request.params.seed,
            },
        }
    )


def embed_digest(model: str, texts: Sequence[str]) -> str:
    return _digest_of({"kind": "embed", "model": model, "texts": list(texts)})


class TranscriptMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


class Transcript:
    """JSONL log of model calls, keyed by request digest.

    Replay hands back recorded responses in first-recorded-first-served order
    per digest, then keeps returning the last one — so a loop that repeats an
    identical request never starves.
    """

    def __init__(self, path: Path, mode: TranscriptMode | str) -> None:
        self.path = Path(path)
        self.mode = TranscriptMode(mode)
        self._lock = threading.Lock()
        self._queues: dict[str, list[dict[str, Any]]] = {}
        self._last: dict[str, dict[str, Any]] = {}
        if self.mode is TranscriptMode.REPLAY:
            self._load()
        elif self.mode is TranscriptMode.RECORD:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def _load(self) -> None:
        if not self.path.is_file():
            raise ValidationFailure(f"replay transcript not found: {self.path}")
        with self.path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationFailure(
                        f"{self.path}:{line_no}: malformed transcript line: {exc}"
                    ) from exc
                digest = entry["digest"]
                self._queues.setdefault(digest, []).append(entry["response"])
                self._last[digest] = entry["response"]

    def lookup(self, digest: str) -> dict[str, Any]:
        with self._lock:
            queue = self._queues.get(digest)
            if queue:
                return queue.pop(0)
            if digest in self._last:
                return self._last[digest]
        raise DeterminismError(f"no recorded response for request digest {digest}")

    def append(self, digest: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        entry = {
            "digest": digest,
            "request": request,
            "response": response,
            "wall_time": time.time(),
        }
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(canonical_json(entry) + "\n")
            self._queues.setdefault(digest, []).append(response)
            self._last[digest] = response


@dataclass(frozen=True)
class ClientConfig:
    base_url: str = ""
    api_key: str = ""
    chat_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-small"
    max_attempts: int = 3
    backoff_base: float = 0.5
    timeout: float = 120.0
    max_in_flight: int = 4
    min_request_interval: float = 0.0

    @classmethod
    def from_env(cls, **overrides: Any) -> "ClientConfig":
        values: dict[str, Any] = {
            "base_url": os.environ.get("RVT_API_BASE", ""),
            "api_key": os.environ.get("RVT_API_KEY", ""),
        }
        values.update(overrides)
        return cls(**values)


def _image_part(img: bytes) -> dict[str, Any]:
    b64 = base64.b64encode(img).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}


def _wire_messages(messages: Sequence[Message]) -> list[dict[str, Any]]:
    out = []
    for m in messages:
        if m.images:
            content: Any = [{"type": "text", "text": m.text}]
            content.extend(_image_part(img) for img in m.images)
        else:
            content = m.text
        out.append({"role": m.role, "content": content})
    return out


class HttpTransport:
    """requests-backed OpenAI-compatible endpoints."""

    def __init__(self, config: ClientConfig, session: Optional[requests.Session] = None) -> None:
        if not config.base_url:
            raise ValidationFailure("no endpoint configured (set RVT_API_BASE)")
        self.config = config
        self.session = session or requests.Session()

    def _post(self, route: str, payload: dict[str, Any]) -> dict[str, Any]:
        url = self.config.base_url.rstrip("/") + route
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = self.session.post(url, json=payload, headers=headers, timeout=self.config.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code in RETRYABLE_STATUSES:
            raise TransportError(f"{url} returned retryable status {resp.status_code}")
        if resp.status_code != 200:
            raise ServiceError(resp.status_code, resp.text)
        return resp.json()

    def chat(self, request: ChatRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": request.model,
            "messages": _wire_messages(request.messages),
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
        }
        if request.params.seed is not None:
            payload["seed"] = request.params.seed
        raw = self._post("/chat/completions", payload)
        choice = raw["choices"][0]
        usage = raw.get("usage", {})
        return {
            "text": choice["message"]["content"],
            "usage": {
                "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                "completion_tokens": int(usage.get("completion_tokens", 0)),
            },
            "finish_reason": choice.get("finish_reason", "stop"),
        }

    def embed(self, model: str, texts: Sequence[str]) -> dict[str, Any]:
        raw = self._post("/embeddings", {"model": model, "input": list(texts)})
        rows = sorted(raw["data"], key=lambda r: r.get("index", 0))
        return {"vectors": [list(map(float, r["embedding"])) for r in rows]}


def _unit(vec: Sequence[float]) -> list[float]:
    arr = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0:
        arr = np.zeros_like(arr)
        arr[0] = 1.0
        return arr.tolist()
    return (arr / norm).tolist()


class ModelClient:
    """Chat + embedding front-end with retries, transcripts, and rate caps."""

    def __init__(
        self,
        config: Optional[ClientConfig] = None,
        transcript: Optional[Transcript] = None,
        transport: Any = None,
        sleeper: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config or ClientConfig()
        self.transcript = transcript
        self._sleep = sleeper
        self._gate = threading.Semaphore(self.config.max_in_flight)
        self._pace_lock = threading.Lock()
        self._next_start = 0.0
        if transport is not None:
            self.transport = transport
        elif transcript is not None and transcript.mode is TranscriptMode.REPLAY:
            self.transport = None  # replay never touches the network
        else:
            self.transport = HttpTransport(self.config)

    # -- plumbing ------------------------------------------------------------

    def _pace(self) -> None:
        interval = self.config.min_request_interval
        if interval <= 0:
            return
        with self._pace_lock:
            now = time.monotonic()
            wait = self._next_start - now
            self._next_start = max(now, self._next_start) + interval
        if wait > 0:
            self._sleep(wait)

    def _call_with_retries(self, fn: Callable[[], dict[str, Any]]) -> dict[str, Any]:
        last: Optional[TransportError] = None
        for attempt in range(self.config.max_attempts):
            if attempt:
                self._sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                with self._gate:
                    self._pace()
                    return fn()
            except TransportError as exc:
                last = exc
                logger.warning("transient transport failure (attempt %d): %s", attempt + 1, exc)
        raise TransportError(f"gave up after {self.config.max_attempts} attempts: {last}")

    def _roundtrip(
        self, digest: str, request_obj: dict[str, Any], fn: Callable[[], dict[str, Any]]
    ) -> dict[str, Any]:
        t = self.transcript
        if t is not None and t.mode is TranscriptMode.REPLAY:
            return t.lookup(digest)
        response = self._call_with_retries(fn)
        if t is not None and t.mode is TranscriptMode.RECORD:
            t.append(digest, request_obj, response)
        return response

    # -- public surface --------------------------------------------------------

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = chat_digest(request)
        request_obj = {
            "model": request.model,
            "messages": [
                {"role": m.role, "text": m.text, "images": len(m.images)}
                for m in request.messages
            ],
            "params": {
                "temperature": request.params.temperature,
                "top_p": request.params.top_p,
                "max_tokens": request.params.max_tokens,
                "seed": request.params.seed,
            },
        }
        raw = self._roundtrip(digest, request_obj, lambda: self.transport.chat(request))
        usage = raw.get("usage", {})
        return ChatResponse(
            text=raw["text"],
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            finish_reason=FinishReason.from_wire(raw.get("finish_reason", "stop")),
        )

    def embed(self, texts: Sequence[str], model: Optional[str] = None) -> list[list[float]]:
        if not texts:
            raise ValidationFailure("embed needs at least one text")
        model = model or self.config.embed_model
        digest = embed_digest(model, texts)
        raw = self._roundtrip(
            digest,
            {"model": model, "texts": list(texts)},
            lambda: self.transport.embed(model, texts),
        )
        vectors = raw["vectors"]
        if len(vectors) != len(texts):
            raise ServiceError(200, f"expected {len(texts)} vectors, got {len(vectors)}")
        return [_unit(v) for v in vectors]

    def chat_structured(
        self, request: ChatRequest, schema: dict[str, Any]
    ) -> tuple[Any, ChatResponse]:
        """Chat, parse, and on a bad parse re-prompt once with the error."""
        first = self.chat(request)
        try:
            return parse_structured(first.text, schema), first
        except StructuredParseError as exc:
            repair = request.appended(
                Message(role="assistant", text=first.text),
                Message(
                    role="user",
                    text=(
                        f"Your previous reply could not be parsed: {exc}. "
                        "Respond again with exactly one JSON object matching the "
                        "required shape and nothing else."
                    ),
                ),
            )
            second = self.chat(repair)
            try:
                return parse_structured(second.text, schema), second
            except StructuredParseError as exc2:
                raise GenerationError(
                    f"structured output failed twice: {exc2}", [first.text, second.text]
                ) from exc2


def extract_json_object(text: str) -> Any:
    """First parseable JSON object in the text; prose around it is ignored."""
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
            continue
        return value
    raise StructuredParseError("no JSON object found in response")


def parse_structured(text: str, schema: dict[str, Any]) -> Any:
    """Pure parse + shape check. Schemas use JSON Schema (draft 2020-12)."""
    import jsonschema

    value = extract_json_object(text)
    try:
        jsonschema.validate(value, schema)
    except jsonschema.ValidationError as exc:
        path = "$" + "".join(f"[{p!r}]" for p in exc.absolute_path)
        raise StructuredParseError(f"shape mismatch at {path}: {exc.message}") from exc
    return value


class HashEmbedder:
    """Deterministic offline embedder: sha256 seeds a gaussian per text.

    Useful for tests and for similarity scoring without a service; identical
    inputs always map to identical unit vectors.
    """

    def __init__(self, dim: int = 256) -> None:
        if dim < 2:
            raise ValidationFailure("embedding dimension must be >= 2")
        self.dim = dim

    def embed(self, texts: Sequence[str], model: Optional[str] = None) -> list[list[float]]:
        if not texts:
            raise ValidationFailure("embed needs at least one text")
        out = []
        for text in texts:
            seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
            rng = np.random.default_rng(seed)
            out.append(_unit(rng.standard_normal(self.dim)))
        return out


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    va, vb = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = float(np.linalg.norm(va) * np.linalg.norm(vb))
    if denom == 0:
        return 0.0
    return float(np.dot(va, vb) / denom)
