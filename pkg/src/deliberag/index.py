"""Exact cosine-similarity vector index over corpus chunks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Category, Corpus
from .errors import CorpusFileError, DeliberagError, DimensionMismatch, EmptyCorpus, ZeroVector

SCHEMA_VERSION = 1
ZERO_NORM = 1e-12
DEFAULT_K = 4
# scores this close are equal up to rounding noise and ordered by chunk_id
TIE_EPS = 1e-12


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    score: float
    rank: int


def _norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(v * v)))


def cosine_similarity(a, b) -> float:
    """(a . b) / (|a| |b|), clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na, nb = _norm(a), _norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    score = float(np.sum(a * b)) / (na * nb)
    return min(1.0, max(-1.0, score))


def _as_category_set(category_filter) -> frozenset[Category] | None:
    if category_filter is None:
        return None
    if isinstance(category_filter, (str, Category)):
        return frozenset({Category(category_filter)})
    return frozenset(Category(c) for c in category_filter)


class VectorIndex:
    """Immutable in-memory index; scoring is exhaustive, never approximate."""

    def __init__(self, chunk_ids, categories, vectors):
        chunk_ids = list(chunk_ids)
        if len(set(chunk_ids)) != len(chunk_ids):
            raise ValueError("chunk ids must be unique")
        matrix = np.array(vectors, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(chunk_ids) or matrix.shape[1] == 0:
            raise DimensionMismatch("vectors must form an (n, dim) matrix matching the chunk ids")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("index vectors must be finite")
        norms = np.sqrt(np.sum(matrix * matrix, axis=1))
        if np.any(norms < ZERO_NORM):
            bad = chunk_ids[int(np.argmax(norms < ZERO_NORM))]
            raise ZeroVector(f"chunk {bad} has a zero embedding")
        matrix.setflags(write=False)
        norms.setflags(write=False)
        self._ids = tuple(chunk_ids)
        self._categories = tuple(Category(c) for c in categories)
        if len(self._categories) != len(self._ids):
            raise ValueError("one category per chunk id is required")
        self._matrix = matrix
        self._norms = norms
        # position of each id in ascending chunk-id order, for the tie-break
        order = sorted(range(len(self._ids)), key=self._ids.__getitem__)
        id_rank = np.empty(len(self._ids), dtype=np.int64)
        id_rank[order] = np.arange(len(self._ids))
        self._id_rank = id_rank

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def chunk_ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def categories(self) -> tuple[Category, ...]:
        return self._categories

    def vector(self, chunk_id: str) -> np.ndarray:
        return self._matrix[self._ids.index(chunk_id)]

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.ndim != 1 or q.size != self.dim:
            raise DimensionMismatch(f"query has dim {q.size}, index has dim {self.dim}")
        qn = _norm(q)
        if qn < ZERO_NORM:
            raise ZeroVector("query vector has zero norm")
        # row-wise sum keeps each row's arithmetic independent of its position
        raw = np.sum(self._matrix * q, axis=1) / (self._norms * qn)
        return np.clip(raw, -1.0, 1.0)

    def top_k(self, query, k: int = DEFAULT_K, category_filter=None) -> list[RetrievalHit]:
        if k < 0:
            raise ValueError("k must be non-negative")
        scores = self.scores(query)
        if k == 0:
            return []
        eligible = np.arange(len(self._ids))
        allowed = _as_category_set(category_filter)
        if allowed is not None:
            eligible = np.array([i for i in eligible if self._categories[i] in allowed], dtype=np.int64)
        if eligible.size == 0:
            return []
        ranked = eligible[np.argsort(-scores[eligible], kind="stable")].tolist()
        chosen: list[int] = []
        start = 0
        while start < len(ranked) and len(chosen) < k:
            head = scores[ranked[start]]
            end = start + 1
            while end < len(ranked) and head - scores[ranked[end]] <= TIE_EPS:
                end += 1
            chosen += sorted(ranked[start:end], key=self._id_rank.__getitem__)
            start = end
        return [RetrievalHit(self._ids[i], float(scores[i]), rank) for rank, i in enumerate(chosen[:k])]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dim": self.dim,
            "entries": [
                {"chunk_id": cid, "category": cat.value, "vector": row.tolist()}
                for cid, cat, row in zip(self._ids, self._categories, self._matrix)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VectorIndex":
        if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
            raise CorpusFileError("index file: unsupported or missing schema_version")
        try:
            entries = data["entries"]
            if not entries:
                raise EmptyCorpus("index file has no entries")
            index = cls(
                [e["chunk_id"] for e in entries],
                [e["category"] for e in entries],
                [e["vector"] for e in entries],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusFileError(f"index file: malformed content: {exc}") from exc
        if index.dim != data.get("dim"):
            raise CorpusFileError("index file: dim field disagrees with vectors")
        return index

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VectorIndex":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusFileError(f"cannot read index file {path}: {exc}") from exc
        return cls.from_dict(data)


def build_index(corpus: Corpus, backend) -> VectorIndex:
    if not corpus.chunks:
        raise EmptyCorpus("corpus has no chunks; run chunk_corpus first")
    vectors = []
    for chunk in corpus.chunks:
        try:
            vectors.append(backend.embed_text(chunk.text))
        except DeliberagError as exc:
            raise type(exc)(f"embedding chunk {chunk.chunk_id}: {exc}") from exc
    return VectorIndex(
        [c.chunk_id for c in corpus.chunks],
        [c.category for c in corpus.chunks],
        vectors,
    )
