"""Inference pipeline: flat index, graph adjustment, GNN scoring, score fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Corpus, Query, label_chunk_relevance, normalize, normalize_rows
from .errors import (
    DimensionMismatch,
    EmptyIndex,
    MissingGraph,
    ModelNotLoaded,
    ParseError,
    SingleClassData,
)
from .graph import (
    EpisodeGraph,
    extract_ego_subgraph,
    graph_score_adjust,
    query_aware_subgraph,
    semantic_graph_score,
)

FEATURES = ("idx", "graph", "gnn")


class FlatIndex:
    """Exact cosine search over unit-normalized chunk embeddings.

    Ties in score are broken by chunk id (then episode id) ascending.
    """

    def __init__(self, matrix: np.ndarray, refs: Sequence[tuple]):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.refs = [tuple(r) for r in refs]
        if self.matrix.shape[0] != len(self.refs):
            raise ValueError("row count must equal ref count")
        order = sorted(range(len(self.refs)), key=lambda i: (self.refs[i][1], self.refs[i][0]))
        self._tiebreak = np.empty(len(self.refs), dtype=np.int64)
        self._tiebreak[order] = np.arange(len(self.refs))

    def __len__(self):
        return len(self.refs)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def scores(self, query_emb) -> np.ndarray:
        if not self.refs:
            raise EmptyIndex("index holds no chunks")
        q = np.asarray(query_emb, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {q.shape} != index dim {self.dim}")
        return np.clip(self.matrix @ normalize(q), -1.0, 1.0)

    def search(self, query_emb, k: int) -> list:
        if k < 1:
            raise ValueError("k must be >= 1")
        s = self.scores(query_emb)
        order = np.lexsort((self._tiebreak, -s))[:k]
        return [(self.refs[i], float(s[i])) for i in order]


def index_build(corpus: Corpus) -> FlatIndex:
    chunks = list(corpus.chunks())
    if not chunks:
        raise EmptyIndex("corpus is empty")
    mat = normalize_rows(np.stack([c.embedding for c in chunks]))
    return FlatIndex(mat, [c.ref for c in chunks])


def index_search(index: FlatIndex, query_emb, k: int) -> list:
    return index.search(query_emb, k)


# --- score fusion -----------------------------------------------------------


@dataclass
class FusionModel:
    """``sigmoid(beta0 + beta . [idx, graph, gnn])``."""

    beta0: float = 0.0
    beta: tuple = (0.0, 0.0, 0.0)
    features: tuple = FEATURES

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        if len(self.beta) != len(FEATURES):
            raise ValueError(f"need {len(FEATURES)} coefficients")
        if not all(math.isfinite(b) for b in (self.beta0,) + self.beta):
            raise ValueError("fusion coefficients must be finite")

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.beta0 + X @ np.asarray(self.beta)

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision(X))

    def to_json(self) -> dict:
        return {"beta0": self.beta0, "beta": list(self.beta), "features": list(self.features)}

    @classmethod
    def from_json(cls, obj: dict) -> "FusionModel":
        if list(obj.get("features", FEATURES)) != list(FEATURES):
            raise ParseError(f"fusion features must be {list(FEATURES)}")
        return cls(float(obj["beta0"]), tuple(obj["beta"]))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FusionModel":
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"bad fusion model file: {exc}") from None


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def fusion_fit(X, y, n_iter: int = 500, lr: float = 0.1, l2: float = 1e-4) -> FusionModel:
    """Full-batch gradient descent on mean log-loss + ``l2/2 * ||beta||^2``.

    Descent runs on standardized features (zero-variance columns are left at
    zero weight) and the coefficients are mapped back to raw feature scale.
    The intercept is not penalized. Starts from all-zero coefficients.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(FEATURES) or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"X must be [n, {len(FEATURES)}] matching y")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise SingleClassData("need at least one row of each label")
    n = X.shape[0]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12
    Z = np.zeros_like(X)
    Z[:, live] = (X[:, live] - mu[live]) / sd[live]
    beta0 = 0.0
    beta = np.zeros(X.shape[1])
    for _ in range(n_iter):
        r = _sigmoid(beta0 + Z @ beta) - y
        beta0 -= lr * r.mean()
        beta -= lr * (Z.T @ r / n + l2 * beta)
    raw = np.where(live, beta / np.where(live, sd, 1.0), 0.0)
    return FusionModel(float(beta0 - raw @ mu), tuple(raw))


def fusion_apply(model: FusionModel, idx_score, graph_score, gnn_score) -> float:
    return float(model.predict_proba([[idx_score, graph_score, gnn_score]])[0])


# --- retrieval --------------------------------------------------------------


@dataclass
class RetrievalOptions:
    k_candidates: int = 50
    alpha: float = 0.5
    ego_radius: int = 1
    query_aware: bool = False
    subgraph_depth: int = 2
    sim_threshold: float = 0.6
    top_n: int = 5


@dataclass
class RetrievalResult:
    ref: tuple
    idx_score: float
    graph_score: float
    gnn_score: float
    combined_score: float
    fused_score: Optional[float] = None

    @property
    def episode_id(self) -> str:
        return self.ref[0]

    @property
    def chunk_id(self) -> str:
        return self.ref[1]

    def features(self) -> list:
        return [self.idx_score, self.graph_score, self.gnn_score]

    def to_json(self) -> dict:
        return {
            "episode_id": self.ref[0],
            "chunk_id": self.ref[1],
            "idx_score": self.idx_score,
            "graph_score": self.graph_score,
            "gnn_score": self.gnn_score,
            "combined_score": self.combined_score,
            "fused_score": self.fused_score,
        }


def candidate_subgraph(g: EpisodeGraph, chunk_id: str, query_emb, opts: RetrievalOptions):
    sub = extract_ego_subgraph(g, chunk_id, opts.ego_radius)
    if not opts.query_aware:
        return sub
    qa = query_aware_subgraph(g, query_emb, [chunk_id], opts.subgraph_depth, opts.sim_threshold)
    keep = set(sub.node_ids) & set(qa.node_ids)
    return g.subgraph(g.index_of(c) for c in keep)


def score_pipeline(query, graphs: Mapping[str, EpisodeGraph], params, model_cfg, index: FlatIndex,
                   opts: RetrievalOptions = None) -> list:
    """Stages 1-4: candidates with index, graph and GNN scores, unfused.

    Returned in the graph-adjusted order (combined score descending).
    """
    from .gnn import score_candidates

    opts = opts or RetrievalOptions()
    if params is None or model_cfg is None:
        raise ModelNotLoaded("GNN parameters are required for retrieval")
    emb = getattr(query, "embedding", query)
    cands = index.search(emb, opts.k_candidates)
    idx_scores = dict(cands)
    adjusted = graph_score_adjust(cands, graphs, opts.alpha)
    subgraphs = []
    for (ep, cid), _ in adjusted:
        subgraphs.append(candidate_subgraph(graphs[ep], cid, emb, opts))
    gnn = score_candidates(emb, subgraphs, params, model_cfg)
    results = []
    for ((ep, cid), combined), s in zip(adjusted, gnn):
        results.append(RetrievalResult(
            (ep, cid), idx_scores[(ep, cid)], semantic_graph_score(graphs[ep], cid),
            s, combined,
        ))
    return results


def retrieve(query, graphs, params, model_cfg, index: FlatIndex, fusion: Optional[FusionModel] = None,
             opts: RetrievalOptions = None) -> list:
    """Ranked results for one query.

    With a fusion model results are ordered by fused score (then GNN score
    descending, chunk id ascending); without one the graph-adjusted order
    is kept.
    """
    opts = opts or RetrievalOptions()
    results = score_pipeline(query, graphs, params, model_cfg, index, opts)
    if fusion is not None:
        fused = fusion.predict_proba([r.features() for r in results])
        for r, f in zip(results, fused.tolist()):
            r.fused_score = float(f)
        results.sort(key=lambda r: (-r.fused_score, -r.gnn_score, r.chunk_id, r.episode_id))
    return results[:opts.top_n]


def relevant_refs(query: Query, corpus: Corpus, overlap_threshold: float = 0.5) -> set:
    """Every chunk ref labeled relevant for ``query``."""
    episodes = {s.episode_id for s in query.relevant_segments}
    if query.relevant_chunk_ids:
        pool = corpus.chunks()
    else:
        pool = (c for ep in episodes if ep in corpus.episodes for c in corpus.episodes[ep])
    return {c.ref for c in pool if label_chunk_relevance(c, query, overlap_threshold)}


def fusion_training_rows(queries, corpus, graphs, params, model_cfg, index, opts=None,
                         overlap_threshold: float = 0.5):
    """Feature rows ``[idx, graph, gnn]`` and 0/1 labels over every candidate."""
    opts = opts or RetrievalOptions()
    X, y = [], []
    for q in queries:
        rel = relevant_refs(q, corpus, overlap_threshold)
        for r in score_pipeline(q, graphs, params, model_cfg, index, opts):
            X.append(r.features())
            y.append(1 if r.ref in rel else 0)
    return np.asarray(X, dtype=np.float64).reshape(-1, len(FEATURES)), np.asarray(y)


def check_graphs(corpus: Corpus, graphs: Mapping) -> None:
    for ep in corpus.episodes:
        if ep not in graphs:
            raise MissingGraph(ep)
