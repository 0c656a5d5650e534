"""Edge-aware GAT encoder, query-guided pooling, fusion network and score head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor
from ..autodiff import functional as F
from ..errors import AllGraphsIsolated, DimensionMismatch, InvalidConfig, ShapeMismatch
from ..graph import BatchedGraph, to_batched_graph

ENCODER_PREFIX = "encoder."


@dataclass
class ModelConfig:
    node_in_dim: int = 32
    query_in_dim: int = 32
    num_layers: int = 2
    hidden_dim: int = 256
    num_heads: int = 4
    edge_type_count: int = 2
    edge_type_embed_dim: int = 16
    fusion_dims: list = field(default_factory=lambda: [512, 256, 128])
    dropout_p: float = 0.3
    leaky_slope: float = 0.2
    layer_norm_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        ints = ("node_in_dim", "query_in_dim", "num_layers", "hidden_dim", "num_heads",
                "edge_type_count", "edge_type_embed_dim")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise InvalidConfig(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.hidden_dim < 2:
            raise InvalidConfig("hidden_dim must be >= 2")
        if not self.fusion_dims or any(int(d) < 1 for d in self.fusion_dims):
            raise InvalidConfig("fusion_dims must be a non-empty list of positive ints")
        if self.fusion_dims[-1] < 4:
            raise InvalidConfig("last fusion dim must be >= 4 (score head uses out/4)")
        if not 0 <= self.dropout_p < 1:
            raise InvalidConfig("dropout_p must be in [0, 1)")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known).validate()


class ModelParams:
    """Ordered ``{name: Tensor}`` store of every learnable tensor."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def get(self, name, default=None):
        return self.tensors.get(name, default)

    @property
    def encoder_names(self) -> list:
        return [n for n in self.tensors if n.startswith(ENCODER_PREFIX)]

    @property
    def head_names(self) -> list:
        return [n for n in self.tensors if not n.startswith(ENCODER_PREFIX)]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: Tensor(t.data, dtype=dtype, name=n) for n, t in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(
            {n: Tensor(t.data.copy(), dtype=t.dtype, name=n) for n, t in self.items()}
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _param_shapes(cfg: ModelConfig) -> list:
    """``(name, shape, kind)`` in a fixed order; kind selects the initializer."""
    h, heads, dh = cfg.hidden_dim, cfg.num_heads, cfg.head_dim
    edge_in = cfg.edge_type_embed_dim + 1
    spec = [("encoder.edge_type_table", (cfg.edge_type_count, cfg.edge_type_embed_dim), "embed")]
    d_in = cfg.node_in_dim
    for l in range(cfg.num_layers):
        p = f"encoder.layer{l}."
        spec += [
            (p + "W", (d_in, h), "glorot"),
            (p + "att_dst", (heads, dh), "glorot"),
            (p + "att_src", (heads, dh), "glorot"),
            (p + "att_edge", (heads, dh), "glorot"),
            (p + "W_edge", (edge_in, h), "glorot"),
            (p + "W_o", (h, h), "glorot"),
        ]
        if d_in != h:
            spec.append((p + "res", (d_in, h), "glorot"))
        spec += [(p + "ln_gamma", (h,), "ones"), (p + "ln_beta", (h,), "zeros")]
        d_in = h
    spec += [
        ("pool.P_n", (h, h), "glorot"), ("pool.b_n", (h,), "zeros"),
        ("pool.P_q", (cfg.query_in_dim, h), "glorot"), ("pool.b_q", (h,), "zeros"),
        ("pool.att1", (h, h // 2), "glorot"), ("pool.att1_b", (h // 2,), "zeros"),
        ("pool.att2", (h // 2, 1), "glorot"), ("pool.att2_b", (1,), "zeros"),
    ]
    comb = h + cfg.query_in_dim
    d_in = comb
    for i, d in enumerate(cfg.fusion_dims):
        spec += [
            (f"fusion.l{i}.W", (d_in, d), "glorot"), (f"fusion.l{i}.b", (d,), "zeros"),
            (f"fusion.ln{i}.gamma", (d,), "ones"), (f"fusion.ln{i}.beta", (d,), "zeros"),
        ]
        d_in = d
    out = cfg.fusion_dims[-1]
    spec += [
        ("fusion.skip.W", (comb, out), "glorot"), ("fusion.skip.b", (out,), "zeros"),
        ("head.l1.W", (out, out // 4), "glorot"), ("head.l1.b", (out // 4,), "zeros"),
        ("head.l2.W", (out // 4, 1), "glorot"), ("head.l2.b", (1,), "zeros"),
    ]
    return spec


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm scales.

    The edge-type table is drawn from N(0, 0.02^2).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "glorot":
            fan_in, fan_out = shape[0], shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, name=name)
    return ModelParams(tensors)


def glorot_bound(shape) -> float:
    return math.sqrt(6.0 / (shape[0] + shape[1]))


# --- forward passes ---------------------------------------------------------


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x), dtype=like.dtype)


def _node_features(bg: BatchedGraph, params: ModelParams, cfg: ModelConfig) -> Tensor:
    if bg.node_features.shape[1] != cfg.node_in_dim:
        raise DimensionMismatch(
            f"node features have dim {bg.node_features.shape[1]}, model expects {cfg.node_in_dim}"
        )
    return _const(bg.node_features, params["encoder.edge_type_table"])


def _incoming_order(bg: BatchedGraph) -> np.ndarray:
    dst = bg.edge_dst
    if dst.size and np.any(dst[1:] < dst[:-1]):
        return np.argsort(dst, kind="stable")
    return None


def gat_layer_forward(
    H: Tensor,
    bg: BatchedGraph,
    params: ModelParams,
    cfg: ModelConfig,
    layer: int,
    training: bool = False,
    rng=None,
    return_attention: bool = False,
):
    """One edge-aware multi-head attention layer.

    Attention is normalized over the incoming edges of each destination node;
    a node without incoming edges gets a zero message and keeps only its
    residual.
    """
    p = f"encoder.layer{layer}."
    N = bg.num_nodes
    if H.shape[0] != N:
        raise ShapeMismatch(f"H has {H.shape[0]} rows, graph has {N} nodes")
    W = params[p + "W"]
    if H.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"layer {layer} expects input dim {W.shape[0]}, got {H.shape[1]}")
    heads, dh, h = cfg.num_heads, cfg.head_dim, cfg.hidden_dim

    Wh = F.matmul(H, W)
    Wh3 = F.reshape(Wh, (N, heads, dh))
    alpha = None
    if bg.num_edges:
        order = _incoming_order(bg)
        src, dst = bg.edge_src, bg.edge_dst
        etype, ew = bg.edge_type_id, bg.edge_weight
        if order is not None:
            src, dst, etype, ew = src[order], dst[order], etype[order], ew[order]
        E = src.shape[0]
        s_dst = F.sum(F.mul(Wh3, params[p + "att_dst"]), axis=-1)
        s_src = F.sum(F.mul(Wh3, params[p + "att_src"]), axis=-1)
        e_feat = F.concat([
            F.embedding_lookup(params["encoder.edge_type_table"], etype),
            _const(ew.reshape(E, 1), W),
        ])
        We = F.reshape(F.matmul(e_feat, params[p + "W_edge"]), (E, heads, dh))
        s_edge = F.sum(F.mul(We, params[p + "att_edge"]), axis=-1)
        logits = F.leaky_relu(
            F.add(F.add(F.gather_rows(s_dst, dst), F.gather_rows(s_src, src)), s_edge),
            cfg.leaky_slope,
        )
        alpha = F.segment_softmax(logits, dst, N)
        attn = F.dropout(alpha, cfg.dropout_p, training, rng)
        msg = F.mul(F.reshape(attn, (E, heads, 1)), F.gather_rows(Wh3, src))
        agg = F.reshape(F.segment_sum(msg, dst, N), (N, h))
        out = F.matmul(agg, params[p + "W_o"])
    else:
        out = _const(np.zeros((N, h)), W)
    res = params.get(p + "res")
    out = F.add(out, F.matmul(H, res) if res is not None else H)
    out = F.layer_norm(F.relu(out), params[p + "ln_gamma"], params[p + "ln_beta"],
                       cfg.layer_norm_eps)
    if return_attention:
        return out, alpha
    return out


def encode(bg: BatchedGraph, params: ModelParams, cfg: ModelConfig, training=False, rng=None):
    H = _node_features(bg, params, cfg)
    for layer in range(cfg.num_layers):
        H = gat_layer_forward(H, bg, params, cfg, layer, training, rng)
    return H


def _query_matrix(query_emb, B: int, like: Tensor, cfg: ModelConfig) -> Tensor:
    if isinstance(query_emb, Tensor):
        q = query_emb
    else:
        q = _const(np.asarray(query_emb, dtype=np.float64), like)
    if q.ndim == 1:
        if q.shape[0] != cfg.query_in_dim:
            raise DimensionMismatch(f"query dim {q.shape[0]} != {cfg.query_in_dim}")
        q = _const(np.broadcast_to(q.data, (B, q.shape[0])), like) if not q.requires_grad \
            else F.gather_rows(F.reshape(q, (1, q.shape[0])), np.zeros(B, dtype=np.int64))
    if q.shape != (B, cfg.query_in_dim):
        raise ShapeMismatch(f"query matrix shape {q.shape}, need {(B, cfg.query_in_dim)}")
    return q


def query_guided_pool(
    H: Tensor,
    query_emb,
    bg: BatchedGraph,
    params: ModelParams,
    cfg: ModelConfig,
    training=False,
    rng=None,
    return_weights=False,
):
    """Query-conditioned attention pooling, one vector per graph in the batch.

    ``query_emb`` is a single ``[d_q]`` vector shared by every graph or a
    ``[B, d_q]`` matrix with one row per graph.
    """
    B = bg.num_graphs
    if H.shape[0] != bg.num_nodes:
        raise ShapeMismatch("H rows must match node count")
    q = _query_matrix(query_emb, B, H, cfg)
    Hn = F.linear(H, params["pool.P_n"], params["pool.b_n"])
    hq = F.linear(q, params["pool.P_q"], params["pool.b_q"])
    z = F.add(Hn, F.gather_rows(hq, bg.batch))
    hidden = F.relu(F.linear(z, params["pool.att1"], params["pool.att1_b"]))
    scores = F.linear(hidden, params["pool.att2"], params["pool.att2_b"])
    alpha = F.segment_softmax(scores, bg.batch, B)
    g = F.segment_sum(F.mul(alpha, H), bg.batch, B)
    g = F.dropout(g, cfg.dropout_p, training, rng)
    if return_weights:
        return g, alpha
    return g


def fuse_and_score(g: Tensor, query_emb, params: ModelParams, cfg: ModelConfig, training=False,
                   rng=None) -> Tensor:
    """Map pooled graph vectors plus the query to relevance scores in (0, 1).

    Accepts a single ``[hidden]`` vector or a ``[B, hidden]`` batch and
    returns a tensor of shape ``[B]`` (``[1]`` for a single vector).
    """
    if g.ndim == 1:
        g = F.reshape(g, (1, g.shape[0]))
    if g.shape[1] != cfg.hidden_dim:
        raise ShapeMismatch(f"graph vector dim {g.shape[1]} != {cfg.hidden_dim}")
    q = _query_matrix(query_emb, g.shape[0], g, cfg)
    combined = F.concat([g, q])
    f = combined
    last = len(cfg.fusion_dims) - 1
    for i in range(len(cfg.fusion_dims)):
        f = F.linear(f, params[f"fusion.l{i}.W"], params[f"fusion.l{i}.b"])
        f = F.layer_norm(f, params[f"fusion.ln{i}.gamma"], params[f"fusion.ln{i}.beta"],
                         cfg.layer_norm_eps)
        if i < last:
            f = F.relu(f)
    f = F.add(f, F.linear(combined, params["fusion.skip.W"], params["fusion.skip.b"]))
    hid = F.relu(F.linear(f, params["head.l1.W"], params["head.l1.b"]))
    logit = F.linear(hid, params["head.l2.W"], params["head.l2.b"])
    return F.sigmoid(F.reshape(logit, (g.shape[0],)))


def score_batched(bg: BatchedGraph, query_emb, params, cfg, training=False, rng=None) -> Tensor:
    """encode -> pool -> fuse_and_score over every graph in ``bg``."""
    H = encode(bg, params, cfg, training, rng)
    g = query_guided_pool(H, query_emb, bg, params, cfg, training, rng)
    return fuse_and_score(g, query_emb, params, cfg, training, rng)


def score_candidates(query, subgraphs: Sequence, params: ModelParams, cfg: ModelConfig,
                     max_batch: Optional[int] = 256) -> list:
    """Relevance score per subgraph for one query; edgeless subgraphs score 0.0.

    ``query`` is a :class:`~qgrag.core.Query` or a raw embedding vector.
    """
    if not subgraphs:
        raise ValueError("no subgraphs given")
    emb = getattr(query, "embedding", query)
    if emb is None:
        raise DimensionMismatch("query has no embedding")
    emb = np.asarray(emb, dtype=np.float64)
    if emb.shape != (cfg.query_in_dim,):
        raise DimensionMismatch(f"query dim {emb.shape} != {cfg.query_in_dim}")
    scores = [0.0] * len(subgraphs)
    step = max_batch or len(subgraphs)
    for lo in range(0, len(subgraphs), step):
        chunk = subgraphs[lo:lo + step]
        try:
            bg = to_batched_graph(chunk)
        except AllGraphsIsolated:
            continue
        out = score_batched(bg, emb, params, cfg).data
        for pos, s in zip(bg.kept, out.tolist()):
            scores[lo + pos] = float(s)
    return scores
