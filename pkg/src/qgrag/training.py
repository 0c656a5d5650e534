"""Two-stage training.

Stage 1 pre-trains the GAT encoder on link prediction over whole episode
graphs. Stage 2 freezes it and fits pooling, fusion and the score head on
(query, positive, hard negative) triplets of ego-subgraphs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import AdamW, Tape, Tensor
from .autodiff import functional as F
from .errors import InvalidConfig, NoNegativesAvailable, NoTriplets
from .gnn import ModelConfig, ModelParams, encode, fuse_and_score, init_params, query_guided_pool
from .graph import BatchedGraph, extract_ego_subgraph, to_batched_graph
from .retrieval import FlatIndex, relevant_refs

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 128
    weight_decay: float = 1e-4
    dropout: float = 0.3
    margin: float = 0.1
    loss_weights: tuple = (1.0, 1.0)
    epochs_stage1: int = 3
    epochs_stage2: int = 20
    graphs_per_batch: int = 8
    seed: int = 0
    ego_radius: int = 1
    negatives_per_positive: int = 2
    overlap_threshold: float = 0.5

    def validate(self) -> "TrainConfig":
        positive = ("lr", "batch_size", "epochs_stage1", "epochs_stage2", "graphs_per_batch",
                    "negatives_per_positive", "overlap_threshold")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise InvalidConfig("weight_decay must be >= 0 and dropout in [0, 1)")
        if not 0 < self.margin < 1:
            raise InvalidConfig("margin must be in (0, 1)")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise InvalidConfig("loss_weights must be two non-negative numbers")
        if self.ego_radius < 0:
            raise InvalidConfig("ego_radius must be >= 0")
        return self


@dataclass
class Triplet:
    query: object
    positive: tuple
    negative: tuple


@dataclass
class TrainResult:
    params: ModelParams
    frozen: set = field(default_factory=set)
    log: list = field(default_factory=list)

    @property
    def epoch_losses(self) -> list:
        return [rec["loss"] for rec in self.log]


# --- losses -----------------------------------------------------------------


def _non_edge_pairs(n: int, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    adj[src, dst] = True
    adj |= adj.T
    np.fill_diagonal(adj, True)
    return np.argwhere(~adj)


def reconstruction_loss(H: Tensor, bg: BatchedGraph, neg_seed=0) -> Tensor:
    """Link-prediction BCE: true edges vs. as many random non-edges per graph.

    Logits are inner products of node embeddings. A pair is a non-edge when
    no edge joins it in either direction; a graph without any non-edge
    contributes positives only.
    """
    rng = np.random.default_rng(neg_seed)
    starts = np.searchsorted(bg.batch, np.arange(bg.num_graphs + 1))
    left, right, labels = [bg.edge_src], [bg.edge_dst], [np.ones(bg.num_edges)]
    for b in range(bg.num_graphs):
        lo, hi = int(starts[b]), int(starts[b + 1])
        m = (bg.edge_src >= lo) & (bg.edge_src < hi)
        n_pos = int(m.sum())
        pairs = _non_edge_pairs(hi - lo, bg.edge_src[m] - lo, bg.edge_dst[m] - lo)
        if n_pos == 0 or len(pairs) == 0:
            continue
        pick = pairs[rng.integers(0, len(pairs), size=n_pos)] + lo
        left.append(pick[:, 0])
        right.append(pick[:, 1])
        labels.append(np.zeros(n_pos))
    a = np.concatenate(left)
    b = np.concatenate(right)
    logits = F.sum(F.mul(F.gather_rows(H, a), F.gather_rows(H, b)), axis=-1)
    return F.bce_with_logits(logits, np.concatenate(labels))


def triplet_bce_loss(s_pos, s_neg, margin=0.1, lambda_t=1.0, lambda_b=1.0, return_parts=False):
    """``λt·max(0, margin − (s⁺ − s⁻)) + λb·(BCE(s⁺, 1) + BCE(s⁻, 0)) / 2``, batch-averaged."""
    s_pos = s_pos if isinstance(s_pos, Tensor) else Tensor(np.atleast_1d(s_pos), dtype=np.float64)
    s_neg = s_neg if isinstance(s_neg, Tensor) else Tensor(np.atleast_1d(s_neg), dtype=s_pos.dtype)
    hinge = F.relu(F.sub(margin, F.sub(s_pos, s_neg)))
    bce = F.mul(F.add(F.log(s_pos, LOG_EPS), F.log(F.sub(1.0, s_neg), LOG_EPS)), -0.5)
    loss = F.mean(F.add(F.mul(hinge, lambda_t), F.mul(bce, lambda_b)))
    if return_parts:
        return loss, float(hinge.data.mean()), float(bce.data.mean())
    return loss


# --- triplet mining ---------------------------------------------------------


def sample_hard_negatives(query, index: FlatIndex, relevant: set, n: int, seed=0) -> list:
    """Top-ranked non-relevant chunks, padded with random non-relevant ones.

    Scans the top ``10 n`` index results; if that yields fewer than ``n``
    negatives the rest are drawn uniformly from the remaining non-relevant
    chunks. Returns fewer than ``n`` only when the corpus runs out.
    """
    emb = getattr(query, "embedding", query)
    hits = index.search(emb, min(len(index), 10 * n))
    negatives = [ref for ref, _ in hits if ref not in relevant][:n]
    if len(negatives) < n:
        taken = set(negatives)
        pool = [r for r in index.refs if r not in relevant and r not in taken]
        if not pool and not negatives:
            raise NoNegativesAvailable("every chunk is relevant for this query")
        rng = np.random.default_rng(seed)
        extra = rng.permutation(len(pool))[: n - len(negatives)]
        negatives += [pool[i] for i in sorted(extra)]
    if not negatives:
        raise NoNegativesAvailable("every chunk is relevant for this query")
    return negatives


def build_triplets(queries, corpus, index: FlatIndex, cfg: TrainConfig) -> list:
    triplets = []
    for qi, q in enumerate(queries):
        pos = sorted(relevant_refs(q, corpus, cfg.overlap_threshold))
        if not pos:
            continue
        try:
            negs = sample_hard_negatives(q, index, set(pos), cfg.negatives_per_positive,
                                         seed=cfg.seed + qi)
        except NoNegativesAvailable:
            continue
        triplets += [Triplet(q, p, n) for p in pos for n in negs]
    return triplets


# --- stage 1 ----------------------------------------------------------------


def train_stage1(graphs: Mapping, model_cfg: ModelConfig, cfg: TrainConfig,
                 params: Optional[ModelParams] = None) -> TrainResult:
    """Fit the encoder on link prediction; returns params with the encoder frozen."""
    cfg.validate()
    run_cfg = replace(model_cfg, dropout_p=cfg.dropout).validate()
    params = params.copy() if params is not None else init_params(model_cfg, cfg.seed)
    trainable = {n: params[n] for n in params.encoder_names}
    for t in trainable.values():
        t.requires_grad = True
    opt = AdamW(trainable, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    episodes = [g for _, g in sorted(graphs.items())]
    log = []
    for epoch in range(1, cfg.epochs_stage1 + 1):
        order = rng.permutation(len(episodes))
        losses = []
        for lo in range(0, len(order), cfg.graphs_per_batch):
            batch = [episodes[i] for i in order[lo:lo + cfg.graphs_per_batch]]
            batch = [g for g in batch if g.num_edges]
            if not batch:
                continue
            bg = to_batched_graph(batch)
            opt.zero_grad()
            with Tape() as tape:
                H = encode(bg, params, run_cfg, training=True, rng=rng)
                loss = reconstruction_loss(H, bg, neg_seed=int(rng.integers(2**31)))
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        rec = {"stage": 1, "epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0,
               "lr": cfg.lr}
        logger.info("stage 1 epoch %d loss %.6f", epoch, rec["loss"])
        log.append(rec)
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    return TrainResult(params, set(params.encoder_names), log)


# --- stage 2 ----------------------------------------------------------------


def _encode_candidates(refs, graphs, params, model_cfg, radius, batch_graphs=64) -> dict:
    """Frozen-encoder node embeddings of each ref's ego-subgraph (None if edgeless)."""
    out = {}
    refs = list(refs)
    subs = [extract_ego_subgraph(graphs[ep], cid, radius) for ep, cid in refs]
    for lo in range(0, len(refs), batch_graphs):
        chunk = subs[lo:lo + batch_graphs]
        live = [i for i, g in enumerate(chunk) if g.num_edges]
        for i in range(len(chunk)):
            out[refs[lo + i]] = None
        if not live:
            continue
        bg = to_batched_graph([chunk[i] for i in live])
        H = encode(bg, params, model_cfg).data
        starts = np.searchsorted(bg.batch, np.arange(bg.num_graphs + 1))
        for b, i in enumerate(live):
            out[refs[lo + i]] = H[starts[b]:starts[b + 1]]
    return out


def _pooled_batch(blocks: Sequence[np.ndarray]) -> tuple:
    H = np.concatenate(blocks)
    batch = np.concatenate([np.full(len(b), i, dtype=np.int64) for i, b in enumerate(blocks)])
    empty = np.zeros(0, dtype=np.int64)
    bg = BatchedGraph(H, empty, empty, np.zeros(0), empty, batch, len(blocks))
    return H, bg


def triplet_scores(batch, cache, params, run_cfg, training, rng):
    """Scores of positives and negatives for a list of triplets, as tensors."""
    blocks = [cache[t.positive] for t in batch] + [cache[t.negative] for t in batch]
    H, bg = _pooled_batch(blocks)
    q = np.stack([np.asarray(t.query.embedding, dtype=np.float64) for t in batch])
    q = np.concatenate([q, q])
    like = params["pool.P_n"]
    Ht = Tensor(H, dtype=like.dtype)
    qt = Tensor(q, dtype=like.dtype)
    g = query_guided_pool(Ht, qt, bg, params, run_cfg, training, rng)
    s = fuse_and_score(g, qt, params, run_cfg, training, rng)
    B = len(batch)
    return F.gather_rows(s, np.arange(B)), F.gather_rows(s, np.arange(B, 2 * B))


def train_stage2(triplets: Sequence[Triplet], graphs: Mapping, backbone: ModelParams,
                 model_cfg: ModelConfig, cfg: TrainConfig, steps: Optional[int] = None) -> TrainResult:
    """Fit pooling, fusion and head on triplets with the encoder frozen.

    ``steps`` caps the number of optimizer steps (default: run
    ``cfg.epochs_stage2`` epochs).
    """
    cfg.validate()
    run_cfg = replace(model_cfg, dropout_p=cfg.dropout).validate()
    params = backbone.copy()
    refs = {t.positive for t in triplets} | {t.negative for t in triplets}
    cache = _encode_candidates(sorted(refs), graphs, params, model_cfg, cfg.ego_radius)
    usable = [t for t in triplets if cache[t.positive] is not None and cache[t.negative] is not None]
    if not usable:
        raise NoTriplets("no triplet has a positive and a negative with a non-empty subgraph")
    if len(usable) < len(triplets):
        logger.info("skipping %d triplets with edgeless subgraphs", len(triplets) - len(usable))

    trainable = {n: params[n] for n in params.head_names}
    for t in trainable.values():
        t.requires_grad = True
    opt = AdamW(trainable, cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    lam_t, lam_b = cfg.loss_weights
    log = []
    done = 0
    epoch = 0
    while True:
        epoch += 1
        if steps is None and epoch > cfg.epochs_stage2:
            break
        order = rng.permutation(len(usable))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [usable[i] for i in order[lo:lo + cfg.batch_size]]
            opt.zero_grad()
            with Tape() as tape:
                sp, sn = triplet_scores(batch, cache, params, run_cfg, True, rng)
                loss = triplet_bce_loss(sp, sn, cfg.margin, lam_t, lam_b)
            tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            done += 1
            if steps is not None and done >= steps:
                break
        rec = {"stage": 2, "epoch": epoch, "loss": float(np.mean(losses)), "lr": cfg.lr}
        logger.info("stage 2 epoch %d loss %.6f", epoch, rec["loss"])
        log.append(rec)
        if steps is not None and done >= steps:
            break
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    return TrainResult(params, set(params.encoder_names), log)


def evaluate_triplets(triplets, graphs, params, model_cfg, cfg: TrainConfig) -> dict:
    """Eval-mode hinge and ranking accuracy over triplets."""
    refs = {t.positive for t in triplets} | {t.negative for t in triplets}
    cache = _encode_candidates(sorted(refs), graphs, params, model_cfg, cfg.ego_radius)
    usable = [t for t in triplets if cache[t.positive] is not None and cache[t.negative] is not None]
    sp, sn = triplet_scores(usable, cache, params, model_cfg, False, None)
    sp, sn = sp.data.astype(np.float64), sn.data.astype(np.float64)
    return {
        "hinge": float(np.maximum(0.0, cfg.margin - (sp - sn)).mean()),
        "accuracy": float((sp > sn).mean()),
        "count": len(usable),
    }
