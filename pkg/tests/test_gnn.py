import math

import numpy as np
import pytest

from qgrag.autodiff import Tensor, default_dtype
from qgrag.errors import BadMagic, ChecksumMismatch, DimensionMismatch, InvalidConfig
from qgrag.gnn import (
    ModelConfig,
    checkpoint_bytes,
    encode,
    fuse_and_score,
    gat_layer_forward,
    init_params,
    load_checkpoint,
    parse_checkpoint,
    query_guided_pool,
    save_checkpoint,
    score_batched,
    score_candidates,
)
from qgrag.graph import BatchedGraph, build_episode_graph, to_batched_graph

from conftest import make_chunks, random_graph

SMALL = dict(node_in_dim=16, query_in_dim=16, hidden_dim=16, num_heads=4,
             fusion_dims=[32, 16, 8], dropout_p=0.0)


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


def params64(cfg, seed=0):
    return init_params(cfg, seed).astype(np.float64)


def test_init_params():
    cfg = ModelConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    for name in a:
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert a.all_finite()
    for name, t in a.items():
        if t.ndim == 2 and name != "encoder.edge_type_table":
            bound = math.sqrt(6.0 / sum(t.shape))
            assert np.abs(t.data).max() <= bound + 1e-6, name
    assert np.abs(a["encoder.edge_type_table"].data).max() < 0.2
    with pytest.raises(InvalidConfig):
        init_params(ModelConfig(hidden_dim=255, num_heads=4))


def _manual_batch(feats, src, dst, etype=None, weight=None):
    n = len(feats)
    src, dst = np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)
    return BatchedGraph(
        np.asarray(feats, dtype=np.float64), src, dst,
        np.asarray(weight if weight is not None else np.ones(len(src))),
        np.asarray(etype if etype is not None else np.zeros(len(src)), dtype=np.int64),
        np.zeros(n, dtype=np.int64), 1,
    )


def _np_layer_norm(x, g, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _naive_gat(H, bg, params, cfg, layer):
    """Per-edge loop re-implementation of one attention layer."""
    p = {k[len(f"encoder.layer{layer}."):]: v.data for k, v in params.items()
         if k.startswith(f"encoder.layer{layer}.")}
    table = params["encoder.edge_type_table"].data
    heads, dh = cfg.num_heads, cfg.head_dim
    Wh = (H @ p["W"]).reshape(len(H), heads, dh)
    N = len(H)
    alphas = np.zeros((bg.num_edges, heads))
    agg = np.zeros((N, heads, dh))
    for v in range(N):
        incoming = [e for e in range(bg.num_edges) if bg.edge_dst[e] == v]
        if not incoming:
            continue
        logits = []
        for e in incoming:
            u = bg.edge_src[e]
            ef = np.concatenate([table[bg.edge_type_id[e]], [bg.edge_weight[e]]])
            we = (ef @ p["W_edge"]).reshape(heads, dh)
            z = (Wh[v] * p["att_dst"]).sum(-1) + (Wh[u] * p["att_src"]).sum(-1) \
                + (we * p["att_edge"]).sum(-1)
            logits.append(np.where(z > 0, z, cfg.leaky_slope * z))
        logits = np.array(logits)
        a = np.exp(logits - logits.max(0))
        a /= a.sum(0)
        for j, e in enumerate(incoming):
            alphas[e] = a[j]
            agg[v] += a[j][:, None] * Wh[bg.edge_src[e]]
    out = agg.reshape(N, -1) @ p["W_o"]
    out = out + (H @ p["res"] if "res" in p else H)
    return _np_layer_norm(np.maximum(out, 0), p["ln_gamma"], p["ln_beta"], cfg.layer_norm_eps), alphas


def test_gat_layer_isolated_node():
    cfg = small_cfg()
    params = params64(cfg)
    H = np.random.default_rng(0).normal(size=(1, 16))
    bg = _manual_batch(H, [], [])
    with default_dtype(np.float64):
        out = gat_layer_forward(Tensor(H), bg, params, cfg, 0).data
    want = _np_layer_norm(np.maximum(H, 0), 1.0, 0.0, cfg.layer_norm_eps)  # d_in == hidden: identity residual
    np.testing.assert_allclose(out, want, atol=1e-10)


def test_gat_layer_single_incoming_edge_alpha_one():
    cfg = small_cfg()
    params = params64(cfg)
    H = np.random.default_rng(1).normal(size=(2, 16))
    bg = _manual_batch(H, [0], [1])
    with default_dtype(np.float64):
        _, alpha = gat_layer_forward(Tensor(H), bg, params, cfg, 0, return_attention=True)
    np.testing.assert_array_equal(alpha.data, np.ones((1, cfg.num_heads)))


@pytest.mark.parametrize("node_in", [16, 12])
def test_gat_layer_matches_naive_oracle(node_in):
    cfg = small_cfg(node_in_dim=node_in)
    params = params64(cfg, 2)
    rng = np.random.default_rng(4)
    g = random_graph(rng, n=4, dim=node_in, tau=0.0, k=2)
    bg = to_batched_graph([g])
    with default_dtype(np.float64):
        out, alpha = gat_layer_forward(Tensor(bg.node_features), bg, params, cfg, 0,
                                       return_attention=True)
    want, want_alpha = _naive_gat(bg.node_features, bg, params, cfg, 0)
    np.testing.assert_allclose(out.data, want, atol=1e-9)
    np.testing.assert_allclose(alpha.data, want_alpha, atol=1e-12)
    sums = np.zeros((4, cfg.num_heads))
    np.add.at(sums, bg.edge_dst, alpha.data)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_encode_one_layer_and_shape():
    cfg = small_cfg(num_layers=1)
    params = params64(cfg)
    bg = to_batched_graph([random_graph(np.random.default_rng(0), n=5)])
    with default_dtype(np.float64):
        a = encode(bg, params, cfg).data
        b = gat_layer_forward(Tensor(bg.node_features), bg, params, cfg, 0).data
    np.testing.assert_array_equal(a, b)
    full = ModelConfig(node_in_dim=16, query_in_dim=16)
    assert encode(bg, init_params(full), full).shape == (5, 256)


def test_encode_batched_equals_separate():
    cfg = small_cfg()
    params = init_params(cfg, 1)
    rng = np.random.default_rng(9)
    A, B = random_graph(rng, n=5), random_graph(rng, n=3)
    both = encode(to_batched_graph([A, B]), params, cfg).data
    sep = np.concatenate([encode(to_batched_graph([g]), params, cfg).data for g in (A, B)])
    np.testing.assert_allclose(both, sep, atol=1e-5)


def _pool_inputs(rng, H):
    n = len(H)
    batch = np.zeros(n, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    return BatchedGraph(H, empty, empty, np.zeros(0), empty, batch, 1)


def test_pool_examples():
    cfg = small_cfg()
    params = params64(cfg)
    rng = np.random.default_rng(0)
    q = rng.normal(size=16)
    with default_dtype(np.float64):
        H = rng.normal(size=(1, 16))
        g = query_guided_pool(Tensor(H), q, _pool_inputs(rng, H), params, cfg).data
        np.testing.assert_array_equal(g[0], H[0])
        H2 = np.vstack([H, H])
        g, w = query_guided_pool(Tensor(H2), q, _pool_inputs(rng, H2), params, cfg,
                                 return_weights=True)
        np.testing.assert_allclose(w.data.ravel(), [0.5, 0.5])
        np.testing.assert_allclose(g.data[0], H[0], atol=1e-12)


def test_fuse_and_score_examples():
    cfg = small_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    g = Tensor(rng.normal(size=(4, 16)) * 50)
    q = rng.normal(size=16) * 50
    s = fuse_and_score(g, q, params, cfg).data
    assert s.shape == (4,) and np.all((s > 0) & (s < 1))
    assert fuse_and_score(g, q, params, cfg).data.tobytes() == s.tobytes()
    params["head.l2.W"].data[...] = 0
    params["head.l2.b"].data[...] = 0
    np.testing.assert_array_equal(fuse_and_score(g, q, params, cfg).data, 0.5)


def test_score_candidates():
    cfg = small_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(3)
    iso = build_episode_graph(make_chunks(rng.normal(size=(1, 16))))
    q = rng.normal(size=16)
    assert score_candidates(q, [iso, iso], params, cfg) == [0.0, 0.0]
    graphs = [random_graph(rng) for _ in range(5)]
    mixed = graphs[:2] + [iso] + graphs[2:]
    batch = score_candidates(q, mixed, params, cfg)
    assert len(batch) == len(mixed) and batch[2] == 0.0
    single = [score_candidates(q, [g], params, cfg)[0] for g in mixed]
    np.testing.assert_allclose(batch, single, atol=1e-5)
    with pytest.raises(DimensionMismatch):
        score_candidates(rng.normal(size=8), graphs, params, cfg)


def test_score_invariant_to_node_permutation():
    cfg = small_cfg()
    params = init_params(cfg, 5)
    rng = np.random.default_rng(8)
    q = rng.normal(size=16)
    for _ in range(5):
        g = random_graph(rng, n=6, tau=0.1, k=2)
        perm = rng.permutation(g.num_nodes)
        inv = np.argsort(perm)
        h = type(g)(g.episode_id, [g.chunks[i] for i in perm], g.embeddings[perm],
                    inv[g.edge_src], inv[g.edge_dst], g.edge_type, g.edge_weight)
        a = score_candidates(q, [g], params, cfg)[0]
        b = score_candidates(q, [h], params, cfg)[0]
        assert abs(a - b) <= 1e-5


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg()
    params = init_params(cfg, 4)
    save_checkpoint(params, cfg, tmp_path / "m.ckpt")
    loaded, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].data.tobytes() == params[name].data.astype(np.float32).tobytes()


def test_checkpoint_corruption():
    cfg = small_cfg()
    buf = checkpoint_bytes(init_params(cfg), cfg)
    for cut in (0, 2, 4, 11, 40, len(buf) // 2, len(buf) - 1):
        with pytest.raises((BadMagic, ChecksumMismatch)):
            parse_checkpoint(buf[:cut])
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        parse_checkpoint(bytes(flipped))
    with pytest.raises(BadMagic):
        parse_checkpoint(b"XXXX" + buf[4:])


def test_checkpoint_dim_mismatch_at_first_use(tmp_path):
    cfg = small_cfg()
    save_checkpoint(init_params(cfg), cfg, tmp_path / "m.ckpt")
    params, cfg2 = load_checkpoint(tmp_path / "m.ckpt")
    rng = np.random.default_rng(0)
    g = random_graph(rng, dim=12)
    with pytest.raises(DimensionMismatch):
        score_batched(to_batched_graph([g]), rng.normal(size=16), params, cfg2)
