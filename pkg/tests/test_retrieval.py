import math

import numpy as np
import pytest

from qgrag.core import Query
from qgrag.errors import DimensionMismatch, EmptyIndex, ModelNotLoaded, SingleClassData
from qgrag.gnn import ModelConfig, init_params
from qgrag.graph import build_graphs
from qgrag.retrieval import (
    FlatIndex,
    FusionModel,
    RetrievalOptions,
    fusion_apply,
    fusion_fit,
    index_build,
    retrieve,
    score_pipeline,
)

CFG = ModelConfig(node_in_dim=32, query_in_dim=32, hidden_dim=32, num_heads=4,
                  fusion_dims=[32, 16, 8])


def test_self_retrieval_and_full_k(small_synthetic):
    corpus, _, _ = small_synthetic
    index = index_build(corpus)
    chunk = list(corpus.chunks())[17]
    (ref, score), = index.search(chunk.embedding, 1)
    assert ref == chunk.ref and score == pytest.approx(1.0)
    everything = index.search(chunk.embedding, len(corpus) + 10)
    assert len(everything) == len(corpus)
    scores = [s for _, s in everything]
    assert scores == sorted(scores, reverse=True)


def test_index_matches_brute_force():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(300, 8))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    mat[5] = mat[9]  # an exact tie
    refs = [("e", f"c{i:03d}") for i in range(300)]
    index = FlatIndex(mat, refs)
    for _ in range(1000):
        q = rng.normal(size=8)
        s = mat @ (q / np.linalg.norm(q))
        brute = sorted(range(300), key=lambda i: (-s[i], refs[i][1]))[:10]
        assert [r for r, _ in index.search(q, 10)] == [refs[i] for i in brute]


def test_index_errors():
    with pytest.raises(EmptyIndex):
        FlatIndex(np.zeros((0, 4)), []).search(np.ones(4), 1)
    index = FlatIndex(np.eye(3), [("e", "a"), ("e", "b"), ("e", "c")])
    with pytest.raises(DimensionMismatch):
        index.search(np.ones(4), 1)


def test_fusion_apply_examples():
    assert fusion_apply(FusionModel(0.0, (0, 0, 0)), 0.3, 0.9, 0.1) == 0.5
    m = FusionModel(0.0, (1, 1, 1))
    assert fusion_apply(m, 0.5, 0.5, 0.5) == pytest.approx(1 / (1 + math.exp(-1.5)))
    assert fusion_apply(m, 0.5, 0.5, 0.5) == pytest.approx(0.8176, abs=1e-4)
    idx_only = FusionModel(0.0, (1, 0, 0))
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(20, 3))
    assert np.argsort(-idx_only.predict_proba(X)).tolist() == np.argsort(-X[:, 0]).tolist()


def test_fusion_fit_separable():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=200)
    X = np.column_stack([y.astype(float), rng.uniform(size=200) * 0.01, np.zeros(200)])
    m = fusion_fit(X, y)
    assert m.beta[0] > 0
    assert np.all((m.predict_proba(X) > 0.5) == (y == 1))


def test_fusion_fit_intercept_only():
    y = np.array([1] * 30 + [0] * 70)
    m = fusion_fit(np.zeros((100, 3)), y)
    assert abs(m.beta0 - math.log(0.3 / 0.7)) < 1e-2
    assert m.beta == (0.0, 0.0, 0.0)


def test_fusion_fit_errors():
    with pytest.raises(SingleClassData):
        fusion_fit(np.zeros((4, 3)), np.ones(4))
    with pytest.raises(DimensionMismatch):
        fusion_fit(np.zeros((4, 2)), np.array([0, 1, 0, 1]))


def test_fusion_argmax_invariant_to_intercept_shift():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(30, 3))
    a = FusionModel(0.2, (1.0, -0.5, 2.0))
    b = FusionModel(3.2, (1.0, -0.5, 2.0))
    assert np.argmax(a.predict_proba(X)) == np.argmax(b.predict_proba(X))


def test_fusion_json_round_trip(tmp_path):
    m = FusionModel(-1.25, (0.5, 0.25, 2.0))
    m.save(tmp_path / "f.json")
    assert FusionModel.load(tmp_path / "f.json") == m


@pytest.fixture(scope="module")
def setup(small_synthetic):
    corpus, evq, _ = small_synthetic
    return corpus, evq, build_graphs(corpus), index_build(corpus), init_params(CFG, 0)


def test_retrieve_collapses_to_index(setup):
    corpus, evq, graphs, index, params = setup
    opts = RetrievalOptions(k_candidates=20, alpha=1.0, top_n=20)
    idx_only = FusionModel(0.0, (1.0, 0.0, 0.0))
    for q in evq[:10]:
        want = [r for r, _ in index.search(q.embedding, 20)]
        got = [r.ref for r in retrieve(q, graphs, params, CFG, index, idx_only, opts)]
        assert got == want
        got = [r.ref for r in retrieve(q, graphs, params, CFG, index, None, opts)]
        assert got == want


def test_retrieve_results_complete(setup):
    corpus, evq, graphs, index, params = setup
    opts = RetrievalOptions(k_candidates=8, top_n=50)
    fusion = FusionModel(0.1, (1.0, 0.5, 0.5))
    for q in evq[:10]:
        res = retrieve(q, graphs, params, CFG, index, fusion, opts)
        assert len(res) == 8
        assert len({r.ref for r in res}) == len(res)
        for r in res:
            assert all(math.isfinite(v) for v in r.features())
            assert 0 < r.fused_score < 1
        fused = [r.fused_score for r in res]
        assert fused == sorted(fused, reverse=True)


def test_retrieve_query_aware_option(setup):
    corpus, evq, graphs, index, params = setup
    opts = RetrievalOptions(k_candidates=10, query_aware=True, sim_threshold=0.0)
    assert len(retrieve(evq[0], graphs, params, CFG, index, None, opts)) == 5


def test_retrieve_needs_model(setup):
    corpus, evq, graphs, index, _ = setup
    with pytest.raises(ModelNotLoaded):
        score_pipeline(evq[0], graphs, None, CFG, index)


def test_text_query_object(setup):
    corpus, evq, graphs, index, params = setup
    q = Query("x", "free text", embedding=evq[0].embedding)
    assert len(retrieve(q, graphs, params, CFG, index)) == 5
