from qgrag.core import label_chunk_relevance
from qgrag.synthetic import SyntheticConfig, make_synthetic


def test_synthetic_shape_and_ground_truth():
    cfg = SyntheticConfig(episodes=10, eval_queries=12, train_queries=6, seed=3)
    corpus, evq, trq = make_synthetic(cfg)
    assert len(corpus.episodes) == 10 and len(corpus) == 200
    assert len(evq) == 12 and len(trq) == 6
    for q in evq + trq:
        eps = {s.episode_id for s in q.relevant_segments}
        assert len(eps) == 1
        assert 2 <= len(q.relevant_segments) <= 4
        ep = eps.pop()
        hits = [c.seq_index for c in corpus.episodes[ep] if label_chunk_relevance(c, q)]
        assert len(hits) == len(q.relevant_segments)
        assert all(b - a > 1 for a, b in zip(hits, hits[1:]))
        assert q.complexity in (4, 5)


def test_synthetic_deterministic():
    a = make_synthetic(SyntheticConfig(episodes=5, eval_queries=4, train_queries=2))
    b = make_synthetic(SyntheticConfig(episodes=5, eval_queries=4, train_queries=2))
    assert [c.text for c in a[0].chunks()] == [c.text for c in b[0].chunks()]
    assert [q.text for q in a[1]] == [q.text for q in b[1]]
