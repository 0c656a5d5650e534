"""Domain types, embedding math, corpus ingestion and relevance labels."""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateChunkId,
    InconsistentDimension,
    InvalidChunk,
    ParseError,
    ZeroVector,
)

ZERO_NORM = 1e-12
TOY_BUCKETS = 4096
QUERY_TYPES = ("multi_hop", "structural", "context_dependent", "other")
_TOKEN_RE = re.compile(r"[^0-9a-z]+")

ChunkRef = tuple  # (episode_id, chunk_id)


@dataclass(frozen=True, eq=False)
class Chunk:
    episode_id: str
    chunk_id: str
    seq_index: int
    text: str
    start_time: float
    end_time: float
    embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.seq_index < 0:
            raise InvalidChunk(f"{self.chunk_id}: negative seq_index")
        if self.start_time < 0 or not self.end_time > self.start_time:
            raise InvalidChunk(
                f"{self.chunk_id}: need 0 <= start_time < end_time, "
                f"got [{self.start_time}, {self.end_time}]"
            )

    @property
    def ref(self) -> ChunkRef:
        return (self.episode_id, self.chunk_id)

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time


@dataclass(frozen=True)
class Segment:
    episode_id: str
    start: float
    end: float


@dataclass(frozen=True, eq=False)
class Query:
    query_id: str
    text: str
    embedding: Optional[np.ndarray] = None
    complexity: int = 1
    query_type: str = "other"
    relevant_segments: tuple = ()
    relevant_chunk_ids: Optional[tuple] = None

    def __post_init__(self):
        if not 1 <= self.complexity <= 5:
            raise ValueError(f"complexity must be in 1..5, got {self.complexity}")
        if self.query_type not in QUERY_TYPES:
            raise ValueError(f"unknown query_type {self.query_type!r}")

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.relevant_segments) or bool(self.relevant_chunk_ids)


@dataclass
class Corpus:
    """Chunks grouped by episode, each group sorted by ``seq_index``."""

    episodes: dict
    dim: Optional[int] = None
    _by_ref: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_ref = {c.ref: c for chunks in self.episodes.values() for c in chunks}

    def __len__(self):
        return len(self._by_ref)

    def chunks(self) -> Iterator[Chunk]:
        for chunks in self.episodes.values():
            yield from chunks

    def get(self, ref: ChunkRef) -> Chunk:
        return self._by_ref[tuple(ref)]

    def __contains__(self, ref) -> bool:
        return tuple(ref) in self._by_ref


# --- embedding math ---------------------------------------------------------


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise DimensionMismatch("normalize expects a non-empty 1-D vector")
    norm = math.sqrt(float(np.dot(v, v)))
    if norm < ZERO_NORM:
        raise ZeroVector("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    a, b = normalize(a), normalize(b)
    # sum of elementwise products is commutative bit-for-bit, np.dot need not be
    s = float(np.sum(a * b))
    return min(1.0, max(-1.0, s))


def normalize_rows(mat) -> np.ndarray:
    """Row-wise L2 normalization; zero rows raise :class:`ZeroVector`."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
    if np.any(norms < ZERO_NORM):
        raise ZeroVector(f"row {int(np.argmin(norms))} has zero norm")
    return mat / norms[:, None]


def cosine_matrix(mat) -> np.ndarray:
    unit = normalize_rows(mat)
    return np.clip(unit @ unit.T, -1.0, 1.0)


# --- toy embedder -----------------------------------------------------------


def tokenize(text: str) -> list:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


@lru_cache(maxsize=16)
def _projection(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    proj = rng.integers(0, 2, size=(TOY_BUCKETS, dim)).astype(np.float64)
    proj = 2.0 * proj - 1.0
    proj.setflags(write=False)
    return proj


def toy_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic hashed bag-of-words embedding.

    Tokens are hashed with CRC32 into 4096 buckets, the count vector is
    projected with a seeded random sign matrix and L2-normalized.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    tokens = tokenize(text)
    if not tokens:
        raise ZeroVector(f"no tokens in {text!r}")
    bag = np.zeros(TOY_BUCKETS)
    for tok in tokens:
        bag[zlib.crc32(tok.encode("utf-8")) % TOY_BUCKETS] += 1.0
    return normalize(bag @ _projection(dim, seed))


# --- relevance labels -------------------------------------------------------


def label_chunk_relevance(chunk: Chunk, query: Query, overlap_threshold: float = 0.5) -> bool:
    """True when the chunk counts as ground truth for ``query``.

    Explicit ``relevant_chunk_ids`` win; otherwise the fraction of the chunk's
    duration covered by the best-overlapping segment of the same episode must
    reach ``overlap_threshold``.
    """
    if not 0 < overlap_threshold <= 1:
        raise ValueError("overlap_threshold must be in (0, 1]")
    if query.relevant_chunk_ids and chunk.chunk_id in query.relevant_chunk_ids:
        return True
    best = 0.0
    for seg in query.relevant_segments:
        if seg.episode_id != chunk.episode_id:
            continue
        overlap = max(0.0, min(seg.end, chunk.end_time) - max(seg.start, chunk.start_time))
        best = max(best, overlap / chunk.duration)
    return best >= overlap_threshold


# --- JSONL I/O --------------------------------------------------------------


def _read_jsonl(path) -> Iterator[tuple]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line=lineno)
            yield lineno, obj


def _embedding_field(obj, lineno):
    emb = obj.get("embedding")
    if emb is None:
        return None
    try:
        arr = np.asarray(emb, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError("embedding must be a list of numbers", line=lineno) from None
    if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ParseError("embedding must be a non-empty finite 1-D list", line=lineno)
    return arr


def group_chunks(chunks: Iterable[Chunk]) -> Corpus:
    """Group chunks by episode, sort by ``seq_index`` and validate."""
    episodes: dict = {}
    dim = None
    for c in chunks:
        group = episodes.setdefault(c.episode_id, {})
        if c.chunk_id in group:
            raise DuplicateChunkId(f"{c.episode_id}/{c.chunk_id}")
        group[c.chunk_id] = c
        if c.embedding is not None:
            if dim is None:
                dim = c.embedding.shape[0]
            elif c.embedding.shape[0] != dim:
                raise InconsistentDimension(
                    f"{c.episode_id}/{c.chunk_id}: dim {c.embedding.shape[0]} != {dim}"
                )
    ordered = {}
    for ep, group in episodes.items():
        chunks_ = sorted(group.values(), key=lambda c: c.seq_index)
        if [c.seq_index for c in chunks_] != list(range(len(chunks_))):
            raise InvalidChunk(f"episode {ep}: seq_index must be 0..n-1 without gaps")
        ordered[ep] = chunks_
    return Corpus(ordered, dim)


def load_corpus(path) -> Corpus:
    chunks = []
    for lineno, obj in _read_jsonl(path):
        try:
            chunk = Chunk(
                episode_id=str(obj["episode_id"]),
                chunk_id=str(obj["chunk_id"]),
                seq_index=int(obj["seq_index"]),
                text=str(obj.get("text", "")),
                start_time=float(obj["start_time"]),
                end_time=float(obj["end_time"]),
                embedding=_embedding_field(obj, lineno),
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", line=lineno) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line=lineno) from None
        chunks.append(chunk)
    return group_chunks(chunks)


def load_queries(path) -> list:
    queries = []
    for lineno, obj in _read_jsonl(path):
        try:
            segments = []
            for seg in obj.get("relevant_segments") or []:
                s = Segment(str(seg["episode_id"]), float(seg["start"]), float(seg["end"]))
                if not s.end > s.start:
                    raise ParseError("zero or negative duration segment", line=lineno)
                segments.append(s)
            ids = obj.get("relevant_chunk_ids")
            queries.append(
                Query(
                    query_id=str(obj["query_id"]),
                    text=str(obj.get("text", "")),
                    embedding=_embedding_field(obj, lineno),
                    complexity=int(obj.get("complexity", 1)),
                    query_type=str(obj.get("query_type", "other")),
                    relevant_segments=tuple(segments),
                    relevant_chunk_ids=tuple(str(i) for i in ids) if ids else None,
                )
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", line=lineno) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), line=lineno) from None
    return queries


def _emb_json(emb):
    return None if emb is None else [float(x) for x in emb]


def chunk_to_json(c: Chunk) -> dict:
    return {
        "episode_id": c.episode_id,
        "chunk_id": c.chunk_id,
        "seq_index": c.seq_index,
        "text": c.text,
        "start_time": c.start_time,
        "end_time": c.end_time,
        "embedding": _emb_json(c.embedding),
    }


def query_to_json(q: Query) -> dict:
    return {
        "query_id": q.query_id,
        "text": q.text,
        "embedding": _emb_json(q.embedding),
        "complexity": q.complexity,
        "query_type": q.query_type,
        "relevant_segments": [
            {"episode_id": s.episode_id, "start": s.start, "end": s.end}
            for s in q.relevant_segments
        ],
        "relevant_chunk_ids": list(q.relevant_chunk_ids) if q.relevant_chunk_ids else None,
    }


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def save_corpus(path, corpus: Corpus) -> None:
    write_jsonl(path, (chunk_to_json(c) for c in corpus.chunks()))


def save_queries(path, queries: Sequence[Query]) -> None:
    write_jsonl(path, (query_to_json(q) for q in queries))


def embed_corpus(corpus: Corpus, dim: int, seed: int = 0, normalized: bool = True) -> Corpus:
    """Fill missing embeddings with :func:`toy_embed`; optionally unit-normalize all."""
    out = []
    for c in corpus.chunks():
        emb = c.embedding if c.embedding is not None else toy_embed(c.text, dim, seed)
        if normalized:
            emb = normalize(emb)
        out.append(replace(c, embedding=emb))
    return group_chunks(out)


def embed_queries(queries: Sequence[Query], dim: int, seed: int = 0) -> list:
    return [
        q if q.embedding is not None else replace(q, embedding=toy_embed(q.text, dim, seed))
        for q in queries
    ]
