"""Run configuration and the end-to-end steps behind the command line.

Every step reads its inputs from, and writes its artifacts to, a single
output directory, so the steps can be run one by one or chained::

    ingest -> build-graph -> train (stage 1, stage 2) -> fuse-fit -> eval
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .core import (
    Corpus,
    embed_corpus,
    embed_queries,
    load_corpus,
    load_queries,
    save_corpus,
    save_queries,
    toy_embed,
    write_jsonl,
)
from .errors import InvalidConfig, MissingBackbone, MissingEmbedding, ModelNotLoaded
from .eval import EvalReport, evaluate
from .gnn import ModelConfig, load_checkpoint, save_checkpoint
from .graph import build_graphs, load_graphs, save_graphs
from .retrieval import (
    FlatIndex,
    FusionModel,
    RetrievalOptions,
    fusion_fit,
    fusion_training_rows,
    index_build,
    retrieve,
)
from .synthetic import SyntheticConfig, make_synthetic
from .training import TrainConfig, build_triplets, train_stage1, train_stage2

logger = logging.getLogger(__name__)

CORPUS_FILE = "corpus.jsonl"
QUERIES_FILE = "queries.jsonl"
TRAIN_QUERIES_FILE = "train_queries.jsonl"
GRAPH_DIR = "graphs"
STAGE1_FILE = "stage1.ckpt"
MODEL_FILE = "model.ckpt"
FUSION_FILE = "fusion.json"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
BASELINE_NAME = "Traditional RAG"
PIPELINE_NAME = "Query-Guided GAT"


@dataclass
class RunConfig:
    """Everything a run needs. Relative paths resolve against ``out_dir``."""

    out_dir: str = "run"
    corpus: Optional[str] = None
    queries: Optional[str] = None
    train_queries: Optional[str] = None
    checkpoint: Optional[str] = None
    fusion_model: Optional[str] = None
    tau: float = 0.6
    k: int = 5
    seed: int = 0
    toy_embed: bool = False
    dim: int = 32
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if not 0 <= self.tau < 1:
            raise InvalidConfig("tau must be in [0, 1)")
        if self.k < 0:
            raise InvalidConfig("k must be >= 0")
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        self.train_config()
        self.retrieval_options()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc.msg}") from None
        if not isinstance(obj, dict):
            raise InvalidConfig("config must be a JSON object")
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def path(self, name: Optional[str], default: str) -> Path:
        p = Path(name or default)
        return p if p.is_absolute() else Path(self.out_dir) / p

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("seed", self.seed)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        try:
            return TrainConfig(**d).validate()
        except TypeError as exc:
            raise InvalidConfig(f"bad train config: {exc}") from None

    def model_config(self, dim: int) -> ModelConfig:
        d = {"node_in_dim": dim, "query_in_dim": dim, **self.model}
        try:
            return ModelConfig.from_dict(d).validate()
        except TypeError as exc:
            raise InvalidConfig(f"bad model config: {exc}") from None

    def retrieval_options(self) -> RetrievalOptions:
        try:
            return RetrievalOptions(**self.retrieval)
        except TypeError as exc:
            raise InvalidConfig(f"bad retrieval options: {exc}") from None


# --- ingest -----------------------------------------------------------------


def _require_embeddings(corpus: Corpus):
    missing = [c.ref for c in corpus.chunks() if c.embedding is None]
    if missing:
        raise MissingEmbedding(f"{len(missing)} chunks lack embeddings, e.g. {missing[0]}")


def _prepare_queries(queries, cfg: RunConfig):
    if cfg.toy_embed:
        return embed_queries(queries, cfg.dim, cfg.seed)
    missing = [q.query_id for q in queries if q.embedding is None]
    if missing:
        raise MissingEmbedding(f"{len(missing)} queries lack embeddings, e.g. {missing[0]}")
    return queries


def ingest(cfg: RunConfig, make_synthetic_episodes: Optional[int] = None) -> dict:
    """Validate, embed and normalize the corpus; write copies into ``out_dir``.

    With ``make_synthetic_episodes`` a synthetic corpus replaces the input
    files (two evaluation queries and one training query per episode).
    """
    out = Path(cfg.out_dir)
    if make_synthetic_episodes is not None:
        n = make_synthetic_episodes
        corpus, evq, trq = make_synthetic(SyntheticConfig(
            episodes=n, eval_queries=2 * n, train_queries=n, seed=cfg.seed,
        ))
    else:
        if cfg.corpus is None:
            raise InvalidConfig("no corpus path given")
        corpus = load_corpus(cfg.corpus)
        evq = load_queries(cfg.queries) if cfg.queries else []
        trq = load_queries(cfg.train_queries) if cfg.train_queries else []
    if cfg.toy_embed:
        corpus = embed_corpus(corpus, cfg.dim, cfg.seed)
    else:
        _require_embeddings(corpus)
        corpus = embed_corpus(corpus, corpus.dim)
    evq = _prepare_queries(evq, cfg)
    trq = _prepare_queries(trq, cfg)
    save_corpus(out / CORPUS_FILE, corpus)
    save_queries(out / QUERIES_FILE, evq)
    save_queries(out / TRAIN_QUERIES_FILE, trq)
    return {"episodes": len(corpus.episodes), "chunks": len(corpus), "dim": corpus.dim,
            "queries": len(evq), "train_queries": len(trq)}


# --- loading helpers --------------------------------------------------------


def load_ingested(cfg: RunConfig) -> Corpus:
    corpus = load_corpus(cfg.path(None, CORPUS_FILE))
    _require_embeddings(corpus)
    return corpus


def load_or_build_graphs(cfg: RunConfig, corpus: Corpus) -> dict:
    graphs = load_graphs(cfg.path(None, GRAPH_DIR), corpus, cfg.tau, cfg.k)
    if graphs is None:
        graphs = build_graphs(corpus, cfg.tau, cfg.k)
    return graphs


def build_graph(cfg: RunConfig, dump: Optional[str] = None) -> dict:
    """Build every episode graph and cache it under ``out_dir/graphs``."""
    corpus = load_ingested(cfg)
    graphs = build_graphs(corpus, cfg.tau, cfg.k)
    save_graphs(graphs, cfg.path(None, GRAPH_DIR), cfg.tau, cfg.k)
    if dump:
        Path(dump).parent.mkdir(parents=True, exist_ok=True)
        with open(dump, "w", encoding="utf-8") as fh:
            for ep in sorted(graphs):
                g = graphs[ep]
                for s, d, t, w in g.edges():
                    fh.write(json.dumps({"episode_id": ep, "src": s, "dst": d,
                                         "type": t, "weight": w}) + "\n")
    return {
        "graphs": len(graphs),
        "edges": sum(g.num_edges for g in graphs.values()),
    }


def _ingested_queries(cfg: RunConfig, name: str) -> list:
    return load_queries(cfg.path(None, name))


# --- training ---------------------------------------------------------------


def train(cfg: RunConfig, stage: str = "all") -> dict:
    """Run stage ``"1"``, ``"2"`` or ``"all"``; writes checkpoints and JSONL logs."""
    corpus = load_ingested(cfg)
    graphs = load_or_build_graphs(cfg, corpus)
    tc = cfg.train_config()
    stage1_path = cfg.path(None, STAGE1_FILE)
    summary = {}
    if stage in ("1", "all"):
        mc = cfg.model_config(corpus.dim)
        r1 = train_stage1(graphs, mc, tc)
        save_checkpoint(r1.params, mc, stage1_path)
        write_jsonl(cfg.path(None, "train_stage1.log.jsonl"), r1.log)
        summary["stage1_losses"] = r1.epoch_losses
    if stage in ("2", "all"):
        if not stage1_path.exists():
            raise MissingBackbone(f"no stage-1 checkpoint at {stage1_path}")
        backbone, mc = load_checkpoint(stage1_path)
        index = index_build(corpus)
        triplets = build_triplets(_ingested_queries(cfg, TRAIN_QUERIES_FILE), corpus, index, tc)
        r2 = train_stage2(triplets, graphs, backbone, mc, tc)
        save_checkpoint(r2.params, mc, cfg.path(cfg.checkpoint, MODEL_FILE))
        write_jsonl(cfg.path(None, "train_stage2.log.jsonl"), r2.log)
        summary["triplets"] = len(triplets)
        summary["stage2_losses"] = r2.epoch_losses
    return summary


def load_model(cfg: RunConfig):
    path = cfg.path(cfg.checkpoint, MODEL_FILE)
    if not path.exists():
        raise ModelNotLoaded(f"no trained model at {path}")
    return load_checkpoint(path)


def load_fusion(cfg: RunConfig) -> Optional[FusionModel]:
    path = cfg.path(cfg.fusion_model, FUSION_FILE)
    return FusionModel.load(path) if path.exists() else None


# --- fusion -----------------------------------------------------------------


def fuse_fit(cfg: RunConfig) -> FusionModel:
    """Fit score fusion on every candidate of the training queries."""
    corpus = load_ingested(cfg)
    graphs = load_or_build_graphs(cfg, corpus)
    params, mc = load_model(cfg)
    tc = cfg.train_config()
    X, y = fusion_training_rows(
        _ingested_queries(cfg, TRAIN_QUERIES_FILE), corpus, graphs, params, mc,
        index_build(corpus), cfg.retrieval_options(), tc.overlap_threshold,
    )
    model = fusion_fit(X, y)
    model.save(cfg.path(cfg.fusion_model, FUSION_FILE))
    return model


# --- retrieval and evaluation -----------------------------------------------


class Retriever:
    """Loaded artifacts of a run, ready to answer queries."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.corpus = load_ingested(cfg)
        self.graphs = load_or_build_graphs(cfg, self.corpus)
        self.params, self.model_cfg = load_model(cfg)
        self.fusion = load_fusion(cfg)
        self.index: FlatIndex = index_build(self.corpus)
        self.opts = cfg.retrieval_options()

    def embed_text(self, text: str):
        if not self.cfg.toy_embed:
            raise MissingEmbedding("free-text queries need --toy-embed")
        return toy_embed(text, self.corpus.dim, self.cfg.seed)

    def retrieve(self, query) -> list:
        return retrieve(query, self.graphs, self.params, self.model_cfg, self.index,
                        self.fusion, self.opts)

    def baseline(self, query) -> list:
        return self.index.search(query.embedding, self.opts.top_n)


def run_eval(cfg: RunConfig, k: int = 5) -> EvalReport:
    """Compare flat cosine search with the full pipeline on the evaluation queries."""
    r = Retriever(cfg)
    queries = _ingested_queries(cfg, QUERIES_FILE)
    thr = cfg.train_config().overlap_threshold
    opts = replace(r.opts, top_n=max(r.opts.top_n, k))
    methods = {
        BASELINE_NAME: lambda q: [r.corpus.get(ref) for ref, _ in r.index.search(q.embedding, k)],
        PIPELINE_NAME: lambda q: [
            r.corpus.get(res.ref)
            for res in retrieve(q, r.graphs, r.params, r.model_cfg, r.index, r.fusion, opts)
        ],
    }
    report = evaluate(methods, queries, k, thr)
    report.save(cfg.path(None, REPORT_JSON), cfg.path(None, REPORT_TEXT))
    return report
