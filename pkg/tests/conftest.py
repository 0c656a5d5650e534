import numpy as np
import pytest

from qgrag.core import Chunk, embed_corpus, embed_queries
from qgrag.graph import build_episode_graph
from qgrag.synthetic import SyntheticConfig, make_synthetic


def make_chunks(embs, episode="ep", seconds=10.0):
    return [
        Chunk(episode, f"{episode}_c{i:02d}", i, f"chunk {i}", i * seconds, (i + 1) * seconds,
              np.asarray(e, dtype=np.float64))
        for i, e in enumerate(embs)
    ]


def random_graph(rng, n=None, dim=16, tau=0.0, k=2, episode="ep"):
    n = n or int(rng.integers(2, 9))
    return build_episode_graph(make_chunks(rng.normal(size=(n, dim)), episode), tau, k)


@pytest.fixture(scope="session")
def small_synthetic():
    """A 20-episode synthetic corpus with toy embeddings."""
    cfg = SyntheticConfig(episodes=20, eval_queries=30, train_queries=20)
    corpus, evq, trq = make_synthetic(cfg)
    corpus = embed_corpus(corpus, 32, 0)
    return corpus, embed_queries(evq, 32, 0), embed_queries(trq, 32, 0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
