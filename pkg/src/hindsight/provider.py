"""Chat-completion and embedding backends.

Two interchangeable implementations sit behind one small interface: an HTTP
client for OpenAI-compatible APIs, and a record/replay pair that persists
every interaction as fixtures so whole runs can be replayed offline and
deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import requests

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

FIXTURE_FILE = "fixtures.jsonl"


class ProviderError(Exception):
    """Base class for provider failures."""


class TransportError(ProviderError):
    """Network-level failure; safe to retry."""


class ProviderRejection(ProviderError):
    """The backend rejected the request; retrying will not help."""


class ReplayMiss(ProviderError):
    """The fixture set has no entry for this request."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role: {self.role!r}")
        if self.role in ("user", "assistant") and not self.content:
            raise ValueError(f"{self.role} message must have non-empty content")


@dataclass(frozen=True)
class GenerationParams:
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 4096
    seed: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError("embedding must not be empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")

    def __len__(self) -> int:
        return len(self.values)


def validate_history(history: Sequence[ChatMessage]) -> None:
    if not history:
        raise ValueError("history must not be empty")
    for i, message in enumerate(history):
        if message.role == "system" and i != 0:
            raise ValueError("a system message is only allowed at position 0")
    if history[-1].role != "user":
        raise ValueError("last message must have role user")


class Provider(Protocol):
    def chat(self, history: Sequence[ChatMessage], params: GenerationParams) -> ChatMessage: ...

    def embed(self, text: str, model_id: str) -> EmbeddingVector: ...


# --- request digests -------------------------------------------------------
#
# The digest is a sha256 over a canonical JSON serialization with a fixed
# field order, so replay survives process restarts and is insensitive to
# anything but (ordered roles, ordered contents, params).


def _digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _params_payload(params: GenerationParams) -> dict:
    return {
        "model_id": params.model_id,
        "temperature": params.temperature,
        "max_output_tokens": params.max_output_tokens,
        "seed": params.seed,
    }


def _messages_payload(history: Sequence[ChatMessage]) -> list[dict]:
    return [{"role": m.role, "content": m.content} for m in history]


def chat_digest(history: Sequence[ChatMessage], params: GenerationParams) -> str:
    return _digest({"kind": "chat", "messages": _messages_payload(history), "params": _params_payload(params)})


def embed_digest(text: str, model_id: str) -> str:
    return _digest({"kind": "embed", "model_id": model_id, "text": text})


# --- fixtures --------------------------------------------------------------


class FixtureStore:
    """A directory of recorded interactions, one JSON object per line.

    Entry schema: {digest, kind: "chat"|"embed", request, response}.
    Files are UTF-8 with LF line endings. Writes are serialized through a
    single lock (single-writer contract); reads are lock-free after load.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._entries: dict[str, dict] = {}
        self._write_lock = threading.Lock()
        if self.directory.is_dir():
            for path in sorted(self.directory.glob("*.jsonl")):
                self._load_file(path)

    def _load_file(self, path: Path) -> None:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}: line {lineno}: invalid fixture entry: {exc}") from exc
                if "digest" not in entry:
                    raise ValueError(f"{path}: line {lineno}: fixture entry missing digest")
                self._entries[entry["digest"]] = entry

    def get(self, digest: str) -> dict | None:
        return self._entries.get(digest)

    def put(self, digest: str, kind: str, request: dict, response: dict) -> dict:
        entry = {"digest": digest, "kind": kind, "request": request, "response": response}
        with self._write_lock:
            if digest in self._entries:
                return self._entries[digest]
            self._entries[digest] = entry
            self.directory.mkdir(parents=True, exist_ok=True)
            with (self.directory / FIXTURE_FILE).open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return entry

    def digests(self) -> list[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


# --- implementations -------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay_s: float = 0.5


class HttpProvider:
    """OpenAI-compatible chat-completions and embeddings client.

    Transport failures (network errors, 429, 5xx) are retried with
    exponential backoff up to ``retry.attempts`` total attempts; other
    4xx responses are rejections and are not retried.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str,
        timeout_s: float = 120.0,
        retry: RetryPolicy | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.timeout_s = timeout_s
        self.retry = retry or RetryPolicy()

    def chat(self, history: Sequence[ChatMessage], params: GenerationParams) -> ChatMessage:
        validate_history(history)
        body: dict = {
            "model": params.model_id,
            "messages": _messages_payload(history),
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.seed is not None:
            body["seed"] = params.seed
        data = self._post("/chat/completions", body)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderRejection(f"malformed chat response: {exc!r}") from exc
        if not content:
            raise ProviderRejection("assistant reply has no content")
        return ChatMessage(role="assistant", content=content)

    def embed(self, text: str, model_id: str) -> EmbeddingVector:
        if not text:
            raise ValueError("text must not be empty")
        data = self._post("/embeddings", {"model": model_id, "input": text})
        try:
            values = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderRejection(f"malformed embedding response: {exc!r}") from exc
        return EmbeddingVector(values=tuple(values), model_id=model_id)

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        headers = {"Authorization": f"Bearer {self._api_key}", "Content-Type": "application/json"}
        failure: TransportError | None = None
        for attempt in range(self.retry.attempts):
            if attempt:
                time.sleep(self.retry.base_delay_s * (2 ** (attempt - 1)))
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                failure = TransportError(str(exc))
                log.warning("transport failure on %s (attempt %d): %s", path, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                failure = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                log.warning("retryable status on %s (attempt %d): %s", path, attempt + 1, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise ProviderRejection(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderRejection(f"non-JSON response body: {exc}") from exc
        assert failure is not None
        raise failure


class ReplayProvider:
    """Serves recorded responses; a pure function of its fixture set.

    A request with no recorded entry is a replay miss, which is fatal: it
    means the fixture set does not cover the run being replayed.
    """

    def __init__(self, store: FixtureStore):
        self.store = store

    def chat(self, history: Sequence[ChatMessage], params: GenerationParams) -> ChatMessage:
        validate_history(history)
        digest = chat_digest(history, params)
        entry = self.store.get(digest)
        if entry is None:
            raise ReplayMiss(f"no chat fixture recorded for digest {digest}")
        return ChatMessage(role="assistant", content=entry["response"]["content"])

    def embed(self, text: str, model_id: str) -> EmbeddingVector:
        if not text:
            raise ValueError("text must not be empty")
        digest = embed_digest(text, model_id)
        entry = self.store.get(digest)
        if entry is None:
            raise ReplayMiss(f"no embedding fixture recorded for digest {digest}")
        return EmbeddingVector(values=tuple(entry["response"]["values"]), model_id=entry["response"]["model_id"])


class RecordingProvider:
    """Wraps another provider and persists every interaction for later replay."""

    def __init__(self, inner: Provider, store: FixtureStore):
        self.inner = inner
        self.store = store

    def chat(self, history: Sequence[ChatMessage], params: GenerationParams) -> ChatMessage:
        reply = self.inner.chat(history, params)
        request = {"messages": _messages_payload(history), "params": _params_payload(params)}
        self.store.put(chat_digest(history, params), "chat", request, {"content": reply.content})
        return reply

    def embed(self, text: str, model_id: str) -> EmbeddingVector:
        vector = self.inner.embed(text, model_id)
        request = {"text": text, "model_id": model_id}
        response = {"values": list(vector.values), "model_id": vector.model_id}
        self.store.put(embed_digest(text, model_id), "embed", request, response)
        return vector
