"""Per-episode multi-relational graphs over chunks.

Nodes are chunks in ``seq_index`` order. Two edge relations exist:
``SEQUENTIAL`` links temporally adjacent chunks in both directions and
``SEMANTIC`` points from a chunk to each of its top-k cosine neighbours
above a threshold.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .core import Chunk, cosine_matrix, normalize, normalize_rows
from .errors import (
    AllGraphsIsolated,
    DimensionMismatch,
    EmptyEpisode,
    MissingEmbedding,
    MissingGraph,
    ParseError,
    UnknownChunk,
    UnknownNode,
)

SEQUENTIAL = 0
SEMANTIC = 1
EDGE_TYPE_NAMES = {SEQUENTIAL: "sequential", SEMANTIC: "semantic"}
EDGE_TYPE_IDS = {v: k for k, v in EDGE_TYPE_NAMES.items()}


@dataclass(eq=False)
class EpisodeGraph:
    """Directed multigraph over the chunks of one episode (or a subgraph of it)."""

    episode_id: str
    chunks: list
    embeddings: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_type: np.ndarray
    edge_weight: np.ndarray
    _index: dict = field(default=None, repr=False)
    _out: list = field(default=None, repr=False)
    _undirected: list = field(default=None, repr=False)

    def __post_init__(self):
        self._index = {c.chunk_id: i for i, c in enumerate(self.chunks)}

    @property
    def num_nodes(self) -> int:
        return len(self.chunks)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def node_ids(self) -> list:
        return [c.chunk_id for c in self.chunks]

    def index_of(self, chunk_id: str) -> int:
        try:
            return self._index[chunk_id]
        except KeyError:
            raise UnknownNode(f"{self.episode_id}/{chunk_id}") from None

    def out_edges(self, i: int) -> np.ndarray:
        """Indices of edges leaving node ``i``."""
        if self._out is None:
            self._out = _bucket(self.edge_src, self.num_nodes)
        return self._out[i]

    def undirected_neighbors(self, i: int) -> np.ndarray:
        if self._undirected is None:
            nbrs = [set() for _ in range(self.num_nodes)]
            for s, d in zip(self.edge_src.tolist(), self.edge_dst.tolist()):
                nbrs[s].add(d)
                nbrs[d].add(s)
            self._undirected = [np.array(sorted(n), dtype=np.int64) for n in nbrs]
        return self._undirected[i]

    def edges(self):
        """Iterate ``(src_id, dst_id, type_name, weight)`` tuples."""
        ids = self.node_ids
        for s, d, t, w in zip(
            self.edge_src.tolist(), self.edge_dst.tolist(),
            self.edge_type.tolist(), self.edge_weight.tolist(),
        ):
            yield ids[s], ids[d], EDGE_TYPE_NAMES[t], w

    def subgraph(self, nodes) -> "EpisodeGraph":
        """Induced subgraph; node order follows the parent graph."""
        keep = np.zeros(self.num_nodes, dtype=bool)
        keep[np.asarray(sorted(nodes), dtype=np.int64)] = True
        remap = np.cumsum(keep) - 1
        mask = keep[self.edge_src] & keep[self.edge_dst]
        idx = np.flatnonzero(keep)
        return EpisodeGraph(
            self.episode_id,
            [self.chunks[i] for i in idx],
            self.embeddings[idx],
            remap[self.edge_src[mask]],
            remap[self.edge_dst[mask]],
            self.edge_type[mask],
            self.edge_weight[mask],
        )


def _bucket(keys: np.ndarray, n: int) -> list:
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [order[bounds[i]:bounds[i + 1]] for i in range(n)]


def _make_graph(episode_id, chunks, emb, src, dst, etype, weight):
    return EpisodeGraph(
        episode_id,
        list(chunks),
        np.asarray(emb, dtype=np.float64),
        np.asarray(src, dtype=np.int64),
        np.asarray(dst, dtype=np.int64),
        np.asarray(etype, dtype=np.int64),
        np.asarray(weight, dtype=np.float64),
    )


def build_episode_graph(chunks: Sequence[Chunk], tau: float = 0.6, k: int = 5) -> EpisodeGraph:
    if not chunks:
        raise EmptyEpisode("episode has no chunks")
    if not 0 <= tau < 1:
        raise ValueError("tau must be in [0, 1)")
    if k < 0:
        raise ValueError("k must be >= 0")
    episode_id = chunks[0].episode_id
    if any(c.episode_id != episode_id for c in chunks):
        raise ValueError("chunks span more than one episode")
    missing = [c.chunk_id for c in chunks if c.embedding is None]
    if missing:
        raise MissingEmbedding(f"{episode_id}: no embedding for {missing[:3]}")
    chunks = sorted(chunks, key=lambda c: c.seq_index)
    emb = np.stack([c.embedding for c in chunks]).astype(np.float64)
    n = len(chunks)

    src, dst, etype, weight = [], [], [], []
    for i in range(n - 1):
        src += [i, i + 1]
        dst += [i + 1, i]
    etype += [SEQUENTIAL] * len(src)
    weight += [1.0] * len(src)

    if n > 1 and k > 0:
        sim = cosine_matrix(emb)
        for i in range(n):
            row = sim[i]
            cand = [j for j in range(n) if j != i and row[j] > tau]
            # highest similarity first, lower index on ties
            cand.sort(key=lambda j: (-row[j], j))
            for j in cand[:k]:
                src.append(i)
                dst.append(j)
                etype.append(SEMANTIC)
                weight.append(float(row[j]))
    return _make_graph(episode_id, chunks, emb, src, dst, etype, weight)


def extract_ego_subgraph(g: EpisodeGraph, center: str, radius: int = 1) -> EpisodeGraph:
    """Induced subgraph on nodes within ``radius`` undirected hops of ``center``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    start = g.index_of(center)
    dist = {start: 0}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        if dist[v] == radius:
            continue
        for u in g.undirected_neighbors(v).tolist():
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return g.subgraph(dist)


def query_aware_subgraph(
    g: EpisodeGraph,
    query_emb,
    seeds,
    max_depth: int = 2,
    sim_threshold: float = 0.6,
) -> EpisodeGraph:
    """Breadth-first expansion from ``seeds`` that only follows query-similar nodes.

    A neighbour joins the result (and the next frontier) when its cosine
    similarity to ``query_emb`` strictly exceeds ``sim_threshold``.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    seeds = [g.index_of(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds must be non-empty")
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if query_emb.shape != (g.embeddings.shape[1],):
        raise DimensionMismatch(
            f"query dim {query_emb.shape} != node dim {g.embeddings.shape[1]}"
        )
    sims = np.clip(normalize_rows(g.embeddings) @ normalize(query_emb), -1.0, 1.0)

    keep = set(seeds)
    visited = set()
    frontier = list(dict.fromkeys(seeds))
    for _ in range(max_depth):
        new_frontier = {}
        for v in frontier:
            if v in visited:
                continue
            visited.add(v)
            for u in g.undirected_neighbors(v).tolist():
                if sims[u] > sim_threshold:
                    keep.add(u)
                    new_frontier[u] = None
        frontier = list(new_frontier)
    return g.subgraph(keep)


def semantic_graph_score(g: EpisodeGraph, chunk_id: str) -> float:
    """Mean weight of semantic edges leaving the node; 0.0 without any."""
    i = g.index_of(chunk_id)
    out = g.out_edges(i)
    weights = g.edge_weight[out][g.edge_type[out] == SEMANTIC]
    return float(weights.mean()) if weights.size else 0.0


def graph_score_adjust(
    results: Sequence[tuple],
    graphs: Mapping[str, EpisodeGraph],
    alpha: float = 0.5,
) -> list:
    """Mix index scores with semantic-edge support.

    ``results`` holds ``((episode_id, chunk_id), idx_score)`` pairs. Returns
    ``((episode_id, chunk_id), combined)`` sorted by combined score, then index
    score (both descending), then chunk id.
    """
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    scored = []
    for ref, idx_score in results:
        ep, cid = ref
        if ep not in graphs:
            raise MissingGraph(ep)
        try:
            gs = semantic_graph_score(graphs[ep], cid)
        except UnknownNode:
            raise UnknownChunk(f"{ep}/{cid}") from None
        combined = alpha * idx_score + (1.0 - alpha) * gs
        scored.append((tuple(ref), combined, idx_score))
    scored.sort(key=lambda r: (-r[1], -r[2], r[0][1], r[0][0]))
    return [(ref, combined) for ref, combined, _ in scored]


@dataclass(eq=False)
class BatchedGraph:
    """Flat tensor form of several graphs, concatenated with index offsets.

    Within each graph edges are ordered by destination, so ``edge_dst`` is
    non-decreasing across the whole batch.
    """

    node_features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_weight: np.ndarray
    edge_type_id: np.ndarray
    batch: np.ndarray
    num_graphs: int
    kept: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    def validate(self) -> None:
        n = self.num_nodes
        if self.batch.shape != (n,):
            raise ValueError("batch length must equal node count")
        if n and (np.any(np.diff(self.batch) < 0) or self.batch[0] != 0
                  or self.batch[-1] != self.num_graphs - 1):
            raise ValueError("batch must be non-decreasing over 0..B-1")
        if self.num_edges:
            if self.edge_src.min() < 0 or max(self.edge_src.max(), self.edge_dst.max()) >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(self.batch[self.edge_src] != self.batch[self.edge_dst]):
                raise ValueError("edge crosses graph segments")

    def split(self) -> list:
        """Per-graph ``(node_features, src, dst, weight, type)`` with local indices."""
        out = []
        starts = np.searchsorted(self.batch, np.arange(self.num_graphs + 1))
        for b in range(self.num_graphs):
            lo, hi = starts[b], starts[b + 1]
            m = (self.edge_src >= lo) & (self.edge_src < hi)
            out.append((
                self.node_features[lo:hi],
                self.edge_src[m] - lo,
                self.edge_dst[m] - lo,
                self.edge_weight[m],
                self.edge_type_id[m],
            ))
        return out


def to_batched_graph(subgraphs: Sequence[EpisodeGraph]) -> BatchedGraph:
    """Concatenate subgraphs; those without edges are dropped.

    ``kept`` records the input position of each surviving graph.
    """
    if not subgraphs:
        raise ValueError("no subgraphs given")
    feats, src, dst, w, t, batch, kept = [], [], [], [], [], [], []
    offset = 0
    for pos, g in enumerate(subgraphs):
        if g.num_edges == 0:
            continue
        order = np.lexsort((g.edge_type, g.edge_src, g.edge_dst))
        feats.append(g.embeddings)
        src.append(g.edge_src[order] + offset)
        dst.append(g.edge_dst[order] + offset)
        w.append(g.edge_weight[order])
        t.append(g.edge_type[order])
        batch.append(np.full(g.num_nodes, len(kept), dtype=np.int64))
        kept.append(pos)
        offset += g.num_nodes
    if not kept:
        raise AllGraphsIsolated(f"all {len(subgraphs)} subgraphs have zero edges")
    if len({f.shape[1] for f in feats}) > 1:
        raise DimensionMismatch("subgraphs have different embedding dimensions")
    return BatchedGraph(
        np.concatenate(feats),
        np.concatenate(src),
        np.concatenate(dst),
        np.concatenate(w),
        np.concatenate(t),
        np.concatenate(batch),
        len(kept),
        kept,
    )


class GraphCache:
    """Get-or-build store of episode graphs keyed by ``(episode_id, tau, k)``.

    Builds happen outside the lock, so two threads may build the same key at
    once; the first stored result wins. Failed builds are not cached.
    """

    def __init__(self):
        self._graphs: dict = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._graphs)

    def __contains__(self, key):
        return key in self._graphs

    def get(self, episode_id: str, build: Callable[[], EpisodeGraph], tau=0.6, k=5):
        key = (episode_id, tau, k)
        with self._lock:
            if key in self._graphs:
                return self._graphs[key]
        g = build()
        with self._lock:
            return self._graphs.setdefault(key, g)

    def put(self, g: EpisodeGraph, tau=0.6, k=5) -> None:
        with self._lock:
            self._graphs.setdefault((g.episode_id, tau, k), g)


def build_graphs(corpus, tau=0.6, k=5, cache: Optional[GraphCache] = None) -> dict:
    cache = cache if cache is not None else GraphCache()
    return {
        ep: cache.get(ep, lambda chunks=chunks: build_episode_graph(chunks, tau, k), tau, k)
        for ep, chunks in corpus.episodes.items()
    }


# --- edge dumps -------------------------------------------------------------


def dump_edges(g: EpisodeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, d, t, w in g.edges():
            fh.write(json.dumps({"src": s, "dst": d, "type": t, "weight": w}) + "\n")


def load_edges(path, chunks: Sequence[Chunk]) -> EpisodeGraph:
    """Rebuild a graph from an edge dump plus its chunks."""
    chunks = sorted(chunks, key=lambda c: c.seq_index)
    index = {c.chunk_id: i for i, c in enumerate(chunks)}
    src, dst, etype, weight = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                src.append(index[rec["src"]])
                dst.append(index[rec["dst"]])
                etype.append(EDGE_TYPE_IDS[rec["type"]])
                weight.append(float(rec["weight"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad edge record: {exc}", line=lineno) from None
    emb = np.stack([c.embedding for c in chunks])
    return _make_graph(chunks[0].episode_id, chunks, emb, src, dst, etype, weight)


def save_graphs(graphs: Mapping[str, EpisodeGraph], directory, tau, k) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for i, (ep, g) in enumerate(graphs.items()):
        name = f"episode_{i:05d}.edges.jsonl"
        dump_edges(g, directory / name)
        names[ep] = name
    meta = {"tau": tau, "k": k, "episodes": names}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_graphs(directory, corpus, tau, k) -> Optional[dict]:
    """Load dumped graphs when present and built with the same ``(tau, k)``."""
    meta_path = Path(directory) / "meta.json"
    if not meta_path.exists():
        return None
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("tau") != tau or meta.get("k") != k:
        return None
    if set(meta["episodes"]) != set(corpus.episodes):
        return None
    return {
        ep: load_edges(Path(directory) / meta["episodes"][ep], chunks)
        for ep, chunks in corpus.episodes.items()
    }
