"""Episodic memory: append-only store of solved instructions with retrieval.

Each episode pairs the instruction that was issued with the full refinement
trajectory the assistant produced for it, plus a cached embedding of the
instruction. Retrieval is top-1 cosine similarity over those embeddings.

Persistence is one JSON object per line (schema-versioned, UTF-8, LF) so the
file can be appended to safely and inspected by hand.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .provider import EmbeddingVector, Provider
from .refine import Trajectory
from .textutil import sha256_text

log = logging.getLogger(__name__)

MEMORY_SCHEMA_VERSION = 1


class MemoryFormatError(ValueError):
    """A memory file line could not be parsed."""


class MemoryVersionError(MemoryFormatError):
    """A memory file line carries an unsupported schema version."""


class DuplicateIdError(ValueError):
    """An episode with this id is already stored."""


class MissingEmbeddingError(ValueError):
    """Retrieval requires every stored episode to carry an embedding."""


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class MemoryTuple:
    """One past episode: the instruction and the full assistant trajectory."""

    id: str
    instruction: str
    trajectory: Trajectory
    source: str = ""
    embedding: EmbeddingVector | None = None
    instruction_digest: str = ""
    created_at: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("id must not be empty")
        if not self.instruction:
            raise ValueError("instruction must not be empty")
        if not self.instruction_digest:
            object.__setattr__(self, "instruction_digest", sha256_text(self.instruction))
        if not self.created_at:
            object.__setattr__(self, "created_at", _utc_now())

    def embedding_is_current(self) -> bool:
        """True when the cached embedding was computed from this exact text."""
        return self.embedding is not None and self.instruction_digest == sha256_text(self.instruction)


class MemoryStore:
    """Ordered, append-only collection of episodes with unique ids."""

    def __init__(self, tuples: Iterable[MemoryTuple] = (), embedding_model_id: str | None = None):
        self._tuples: list[MemoryTuple] = []
        self._ids: set[str] = set()
        self.embedding_model_id = embedding_model_id
        for t in tuples:
            self.append(t)

    def __len__(self) -> int:
        return len(self._tuples)

    def __iter__(self) -> Iterator[MemoryTuple]:
        return iter(self._tuples)

    def __contains__(self, episode_id: str) -> bool:
        return episode_id in self._ids

    @property
    def tuples(self) -> tuple[MemoryTuple, ...]:
        return tuple(self._tuples)

    def get(self, episode_id: str) -> MemoryTuple | None:
        for t in self._tuples:
            if t.id == episode_id:
                return t
        return None

    def append(self, t: MemoryTuple) -> None:
        """Append one episode; existing episodes are never modified."""
        if t.id in self._ids:
            raise DuplicateIdError(f"duplicate memory id: {t.id}")
        if t.embedding is not None:
            if self.embedding_model_id is None:
                self.embedding_model_id = t.embedding.model_id
            elif t.embedding.model_id != self.embedding_model_id:
                raise ValueError(
                    f"embedding model mismatch: store has {self.embedding_model_id!r}, "
                    f"tuple {t.id} has {t.embedding.model_id!r}"
                )
        self._tuples.append(t)
        self._ids.add(t.id)

    def _replace_at(self, index: int, t: MemoryTuple) -> None:
        # Internal: used by the embedding cache to attach vectors in place.
        self._tuples[index] = t


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """dot(a,b) / (‖a‖·‖b‖), clamped into [-1, 1]."""
    if a.model_id != b.model_id:
        raise ValueError(f"embedding model mismatch: {a.model_id!r} vs {b.model_id!r}")
    if len(a.values) != len(b.values):
        raise ValueError(f"dimension mismatch: {len(a.values)} vs {len(b.values)}")
    va = np.asarray(a.values, dtype=float)
    vb = np.asarray(b.values, dtype=float)
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return float(min(1.0, max(-1.0, float(va @ vb) / (norm_a * norm_b))))


def retrieve_most_similar(store: MemoryStore, query: EmbeddingVector) -> tuple[MemoryTuple, float]:
    """The stored episode whose instruction embedding is closest to the query.

    Ties are broken in favor of the earliest-appended episode so that
    retrieval is reproducible.
    """
    if len(store) == 0:
        raise ValueError("cannot retrieve from an empty store")
    rows = []
    for t in store:
        if t.embedding is None:
            raise MissingEmbeddingError(f"episode {t.id} has no embedding")
        if t.embedding.model_id != query.model_id:
            raise ValueError(
                f"embedding model mismatch: query {query.model_id!r}, episode {t.id} {t.embedding.model_id!r}"
            )
        if len(t.embedding.values) != len(query.values):
            raise ValueError(f"dimension mismatch: query {len(query.values)}, episode {t.id} {len(t.embedding.values)}")
        rows.append(t.embedding.values)
    matrix = np.asarray(rows, dtype=float)
    q = np.asarray(query.values, dtype=float)
    norms = np.linalg.norm(matrix, axis=1)
    query_norm = float(np.linalg.norm(q))
    if query_norm == 0.0 or bool((norms == 0.0).any()):
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    scores = (matrix @ q) / (norms * query_norm)
    winner = int(np.argmax(scores))  # argmax returns the first (earliest) maximum
    return store.tuples[winner], float(np.clip(scores[winner], -1.0, 1.0))


def ensure_embeddings(
    store: MemoryStore,
    provider: Provider,
    model_id: str | None = None,
    persist_path: str | Path | None = None,
) -> MemoryStore:
    """Embed every episode's instruction, reusing cached vectors.

    A cached embedding is reused only when the stored content digest still
    matches the instruction text, so edits never leave a stale vector behind.
    If the provider fails partway, progress so far is persisted (when a path
    is given) before the error propagates.
    """
    model = model_id or store.embedding_model_id
    if model is None:
        raise ValueError("no embedding model id configured")
    try:
        for index, t in enumerate(store.tuples):
            if t.embedding_is_current():
                continue
            vector = provider.embed(t.instruction, model)
            updated = dataclasses.replace(
                t, embedding=vector, instruction_digest=sha256_text(t.instruction)
            )
            store._replace_at(index, updated)
    except Exception:
        if persist_path is not None:
            save(store, persist_path)
        raise
    if store.embedding_model_id is None:
        store.embedding_model_id = model
    if persist_path is not None:
        save(store, persist_path)
    return store


# --- persistence -----------------------------------------------------------


def _tuple_to_record(t: MemoryTuple) -> dict:
    record = {
        "version": MEMORY_SCHEMA_VERSION,
        "id": t.id,
        "source": t.source,
        "instruction": t.instruction,
        "instruction_digest": t.instruction_digest,
        "trajectory": t.trajectory.to_dict(),
        "created_at": t.created_at,
    }
    if t.embedding is not None:
        record["embedding"] = {"model_id": t.embedding.model_id, "values": list(t.embedding.values)}
    return record


def _tuple_from_record(record: dict) -> MemoryTuple:
    embedding = None
    if record.get("embedding") is not None:
        embedding = EmbeddingVector(
            values=tuple(record["embedding"]["values"]), model_id=record["embedding"]["model_id"]
        )
    return MemoryTuple(
        id=record["id"],
        instruction=record["instruction"],
        trajectory=Trajectory.from_dict(record["trajectory"]),
        source=record.get("source", ""),
        embedding=embedding,
        instruction_digest=record.get("instruction_digest", ""),
        created_at=record.get("created_at", ""),
    )


def save(store: MemoryStore, path: str | Path) -> None:
    """Write the store as one JSON object per line, in append order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for t in store:
            fh.write(json.dumps(_tuple_to_record(t), ensure_ascii=False) + "\n")
    tmp.replace(path)


def load(path: str | Path) -> MemoryStore:
    """Load a store; ``load(save(store))`` reproduces the observable state."""
    path = Path(path)
    store = MemoryStore()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MemoryFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            version = record.get("version")
            if version != MEMORY_SCHEMA_VERSION:
                raise MemoryVersionError(
                    f"{path}: line {lineno}: unsupported memory schema version {version!r} "
                    f"(supported: {MEMORY_SCHEMA_VERSION})"
                )
            try:
                store.append(_tuple_from_record(record))
            except (KeyError, TypeError) as exc:
                raise MemoryFormatError(f"{path}: line {lineno}: malformed record: {exc!r}") from exc
    return store
