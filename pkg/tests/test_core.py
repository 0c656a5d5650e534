import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qgrag.core import (
    Chunk,
    Query,
    Segment,
    cosine_similarity,
    label_chunk_relevance,
    load_corpus,
    load_queries,
    normalize,
    save_corpus,
    toy_embed,
)
from qgrag.errors import (
    DuplicateChunkId,
    InconsistentDimension,
    InvalidChunk,
    ParseError,
    ZeroVector,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(2, 12), elements=finite).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_allclose(normalize([1, 0, 0]), [1, 0, 0])
    with pytest.raises(ZeroVector):
        normalize([0, 0])


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 1], [1, 0]) - 1 / math.sqrt(2)) < 1e-4


@given(vectors)
def test_normalize_idempotent(v):
    once = normalize(v)
    np.testing.assert_allclose(normalize(once), once, atol=1e-6)


@given(st.integers(2, 10).flatmap(
    lambda d: st.tuples(arrays(np.float64, d, elements=finite), arrays(np.float64, d, elements=finite))
))
def test_cosine_symmetric_and_bounded(ab):
    a, b = ab
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert -1.0 <= s <= 1.0


def test_toy_embed_examples():
    a = toy_embed("hello world", 8, 42)
    np.testing.assert_array_equal(a, toy_embed("hello world", 8, 42))
    np.testing.assert_array_equal(a, toy_embed("world hello", 8, 42))
    assert cosine_similarity(toy_embed("graphs", 8, 42), toy_embed("unrelated zebra", 8, 42)) < 1.0
    with pytest.raises(ZeroVector):
        toy_embed("  ...  ", 8, 0)


@settings(max_examples=50)
@given(st.text(alphabet="abcdefgh xyz", min_size=1).filter(lambda s: s.strip()),
       st.integers(2, 64))
def test_toy_embed_unit_norm(text, dim):
    assert abs(np.linalg.norm(toy_embed(text, dim, 0)) - 1.0) < 1e-6


def _chunk(start, end, ep="e"):
    return Chunk(ep, "c", 0, "", start, end)


def _query(*segs):
    return Query("q", "", relevant_segments=tuple(Segment("e", a, b) for a, b in segs))


def test_relevance_examples():
    c = _chunk(10, 20)
    assert label_chunk_relevance(c, _query((0, 100)), 0.5)
    assert not label_chunk_relevance(c, _query((30, 40)), 0.5)
    assert label_chunk_relevance(c, _query((15, 100)), 0.5)
    assert not label_chunk_relevance(_chunk(10, 20, "other"), _query((0, 100)), 0.5)


def test_relevance_explicit_ids():
    q = Query("q", "", relevant_chunk_ids=("c",))
    assert label_chunk_relevance(_chunk(0, 1), q)


@given(st.floats(0, 50), st.floats(1, 30), st.floats(0, 60), st.floats(0.1, 40),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_relevance_monotone_in_threshold(cs, cl, ss, sl, t1, t2):
    lo, hi = sorted((t1, t2))
    c, q = _chunk(cs, cs + cl), _query((ss, ss + sl))
    if label_chunk_relevance(c, q, hi):
        assert label_chunk_relevance(c, q, lo)


def test_chunk_validation():
    with pytest.raises(InvalidChunk):
        Chunk("e", "c", 0, "", 5, 5)
    with pytest.raises(InvalidChunk):
        Chunk("e", "c", -1, "", 0, 1)


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def _rec(ep, i, dim=8, **kw):
    r = {"episode_id": ep, "chunk_id": f"{ep}-{i}", "seq_index": i, "text": f"t{i}",
         "start_time": float(i), "end_time": i + 1.0, "embedding": [1.0] + [0.0] * (dim - 1)}
    r.update(kw)
    return r


def test_load_corpus_groups_and_sorts(tmp_path):
    recs = [_rec(ep, i) for ep in ("a", "b") for i in range(3)]
    rng = np.random.default_rng(0)
    recs = [recs[i] for i in rng.permutation(len(recs))]
    _write(tmp_path / "c.jsonl", recs)
    corpus = load_corpus(tmp_path / "c.jsonl")
    assert sorted(corpus.episodes) == ["a", "b"]
    for ep, chunks in corpus.episodes.items():
        assert [c.seq_index for c in chunks] == [0, 1, 2]
        assert [c.chunk_id for c in chunks] == [f"{ep}-{i}" for i in range(3)]
    assert corpus.dim == 8


def test_load_corpus_errors(tmp_path):
    p = tmp_path / "c.jsonl"
    _write(p, [_rec("a", 0), _rec("a", 1, dim=7)])
    with pytest.raises(InconsistentDimension):
        load_corpus(p)
    _write(p, [_rec("a", 0), _rec("a", 0)])
    with pytest.raises(DuplicateChunkId):
        load_corpus(p)
    _write(p, [_rec("a", 0), _rec("a", 2)])
    with pytest.raises(InvalidChunk):
        load_corpus(p)
    p.write_text('{"episode_id": "a"}\n{not json\n')
    with pytest.raises(ParseError) as err:
        load_corpus(p)
    assert err.value.line in (1, 2)


def test_corpus_round_trip(tmp_path):
    _write(tmp_path / "c.jsonl", [_rec("a", i) for i in range(3)])
    corpus = load_corpus(tmp_path / "c.jsonl")
    save_corpus(tmp_path / "d.jsonl", corpus)
    again = load_corpus(tmp_path / "d.jsonl")
    for x, y in zip(corpus.chunks(), again.chunks()):
        assert x.ref == y.ref and x.text == y.text
        np.testing.assert_array_equal(x.embedding, y.embedding)


def test_load_queries(tmp_path):
    p = tmp_path / "q.jsonl"
    _write(p, [{"query_id": "q1", "text": "x", "complexity": 4, "query_type": "multi_hop",
                "relevant_segments": [{"episode_id": "a", "start": 0, "end": 10}]}])
    (q,) = load_queries(p)
    assert q.complexity == 4 and q.relevant_segments[0].end == 10
    _write(p, [{"query_id": "q1", "relevant_segments": [{"episode_id": "a", "start": 3, "end": 3}]}])
    with pytest.raises(ParseError):
        load_queries(p)
