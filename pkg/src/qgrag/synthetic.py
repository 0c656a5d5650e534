"""Synthetic multi-hop corpus.

Each episode is a sequence of chunks made of filler words. Inside episodes we
plant *chains*: 2-4 non-adjacent chunks sharing a block of repeated "glue"
words (so they link semantically), each also carrying its own concept words.
A chain's query asks about the concepts of its first and last member, so the
middle members share no words with the query at all. For every query a few
*distractor* chunks in other episodes repeat some of the query's concept
words without any glue, which makes them lexically closer to the query than
the true evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Chunk, Query, Segment, group_chunks

_SYLLABLES = [
    "ka", "lo", "mi", "ru", "te", "sa", "vo", "ne", "pi", "du", "ga", "ri",
    "zo", "fe", "bu", "ha", "ji", "wo", "xe", "qu", "ny", "ta", "me", "so",
]

_TEMPLATES = {
    "multi_hop": "how does {a} connect with {c}",
    "structural": "what had to be established about {a} before {c}",
    "context_dependent": "why was {a} chosen given what was said about {c}",
}
_TYPE_CYCLE = ["multi_hop", "multi_hop", "multi_hop", "structural", "context_dependent"]


@dataclass
class SyntheticConfig:
    episodes: int = 100
    chunks_per_episode: int = 20
    eval_queries: int = 200
    train_queries: int = 100
    chain_min: int = 2
    chain_max: int = 4
    glue_words: int = 3
    glue_repeat: int = 4
    concept_words: int = 3
    concept_repeat: int = 3
    chain_filler: int = 1
    filler_words: int = 12
    topic_words: int = 1
    distractors_min: int = 2
    distractors_max: int = 7
    distractor_hits: int = 2
    distractor_repeat: int = 2
    distractor_filler: int = 6
    chunk_seconds: float = 30.0
    seed: int = 0


class _Words:
    """Unique pseudo-words drawn without replacement."""

    def __init__(self, rng):
        self.rng = rng
        self.used = set()

    def take(self, n):
        out = []
        while len(out) < n:
            k = int(self.rng.integers(2, 5))
            w = "".join(self.rng.choice(_SYLLABLES, size=k))
            if w not in self.used:
                self.used.add(w)
                out.append(w)
        return out


def _place_chain(rng, free, length):
    """Pick ``length`` pairwise non-adjacent free positions, or None."""
    for _ in range(200):
        pos = sorted(rng.choice(sorted(free), size=length, replace=False).tolist())
        if all(b - a > 1 for a, b in zip(pos, pos[1:])):
            return pos
    return None


def make_synthetic(cfg: SyntheticConfig = None):
    """Return ``(corpus, eval_queries, train_queries)``; embeddings are left empty."""
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    words = _Words(rng)
    filler = words.take(600)
    n_chains = cfg.eval_queries + cfg.train_queries
    n = cfg.chunks_per_episode

    texts = {}
    topics = {}
    free = {}
    for e in range(cfg.episodes):
        ep = f"ep{e:03d}"
        topics[ep] = words.take(cfg.topic_words)
        free[ep] = set(range(n))

    chains = []
    for c in range(n_chains):
        length = int(rng.integers(cfg.chain_min, cfg.chain_max + 1))
        for _ in range(1000):
            ep = f"ep{int(rng.integers(cfg.episodes)):03d}"
            if len(free[ep]) < 2 * length:
                continue
            pos = _place_chain(rng, free[ep], length)
            if pos is not None:
                break
        else:
            raise ValueError("corpus too small for the requested number of chains")
        free[ep] -= set(pos)
        glue = words.take(cfg.glue_words)
        concepts = [words.take(cfg.concept_words) for _ in pos]
        for p, con in zip(pos, concepts):
            toks = glue * cfg.glue_repeat + con * cfg.concept_repeat
            toks += list(rng.choice(filler, size=cfg.chain_filler)) + topics[ep]
            rng.shuffle(toks)
            texts[(ep, p)] = toks
        chains.append((ep, pos, concepts))

    for e in range(cfg.episodes):
        ep = f"ep{e:03d}"
        for p in sorted(free[ep]):
            texts[(ep, p)] = list(rng.choice(filler, size=cfg.filler_words)) + topics[ep]

    queries = []
    for c, (ep, pos, concepts) in enumerate(chains):
        first, last = concepts[0], concepts[-1]
        qtype = _TYPE_CYCLE[c % len(_TYPE_CYCLE)]
        text = _TEMPLATES[qtype].format(a=" ".join(first), c=" ".join(last))
        n_dis = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
        query_words = first + last
        hosts = [e for e in free if e != ep and free[e]]
        for _ in range(n_dis):
            host = hosts[int(rng.integers(len(hosts)))]
            p = sorted(free[host])[int(rng.integers(len(free[host])))]
            hits = list(rng.choice(query_words, size=cfg.distractor_hits, replace=False))
            toks = hits * cfg.distractor_repeat + list(rng.choice(filler, size=cfg.distractor_filler))
            rng.shuffle(toks)
            texts[(host, p)] = toks + topics[host]
        segments = tuple(
            Segment(ep, p * cfg.chunk_seconds, (p + 1) * cfg.chunk_seconds) for p in pos
        )
        queries.append(Query(
            query_id=f"q{c:04d}",
            text=text,
            complexity=4 if len(pos) <= 3 else 5,
            query_type=qtype,
            relevant_segments=segments,
        ))

    chunks = []
    for e in range(cfg.episodes):
        ep = f"ep{e:03d}"
        for p in range(n):
            chunks.append(Chunk(
                episode_id=ep,
                chunk_id=f"{ep}_c{p:02d}",
                seq_index=p,
                text=" ".join(texts[(ep, p)]),
                start_time=p * cfg.chunk_seconds,
                end_time=(p + 1) * cfg.chunk_seconds,
            ))
    corpus = group_chunks(chunks)
    return corpus, queries[:cfg.eval_queries], queries[cfg.eval_queries:]
