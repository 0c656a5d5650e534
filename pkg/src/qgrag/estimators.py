"""scikit-learn style wrappers around the functional API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import Corpus
from .eval import recall_at_k
from .gnn import ModelConfig
from .graph import build_graphs
from .retrieval import (
    FusionModel,
    RetrievalOptions,
    fusion_fit,
    fusion_training_rows,
    index_build,
    retrieve,
)
from .training import TrainConfig, build_triplets, train_stage1, train_stage2


class ScoreFusion(ClassifierMixin, BaseEstimator):
    """Logistic fusion of ``[idx, graph, gnn]`` score columns."""

    def __init__(self, n_iter=500, lr=0.1, l2=1e-4):
        self.n_iter = n_iter
        self.lr = lr
        self.l2 = l2

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.model_ = fusion_fit(X, y, self.n_iter, self.lr, self.l2)
        self.classes_ = np.array([0, 1])
        self.coef_ = np.asarray(self.model_.beta)[None, :]
        self.intercept_ = np.array([self.model_.beta0])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision(check_array(X, dtype=np.float64))

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


class _RetrieverBase(BaseEstimator):
    top_n = 5

    def predict(self, queries):
        """Ranked chunk refs for each query."""
        return [self._rank(q) for q in queries]

    def score(self, queries, y=None):
        """Mean hit-rate Recall@``top_n``."""
        check_is_fitted(self, "corpus_")
        hits = [recall_at_k([self.corpus_.get(r) for r in refs], q, self.top_n)
                for q, refs in zip(queries, self.predict(queries))]
        return float(np.mean(hits)) if hits else 0.0


class FlatCosineRetriever(_RetrieverBase):
    """Exact cosine top-n over chunk embeddings."""

    def __init__(self, top_n=5):
        self.top_n = top_n

    def fit(self, corpus: Corpus, queries=None):
        self.corpus_ = corpus
        self.index_ = index_build(corpus)
        return self

    def _rank(self, query):
        check_is_fitted(self, "index_")
        return [ref for ref, _ in self.index_.search(query.embedding, self.top_n)]


class GraphRetriever(_RetrieverBase):
    """Full pipeline: graphs, two-stage GNN training, score fusion.

    ``fit`` takes an embedded corpus and embedded training queries with
    ground truth.
    """

    def __init__(self, tau=0.6, k=5, model_config=None, train_config=None,
                 k_candidates=50, alpha=0.5, top_n=5, use_fusion=True):
        self.tau = tau
        self.k = k
        self.model_config = model_config
        self.train_config = train_config
        self.k_candidates = k_candidates
        self.alpha = alpha
        self.top_n = top_n
        self.use_fusion = use_fusion

    def _opts(self):
        return RetrievalOptions(k_candidates=self.k_candidates, alpha=self.alpha, top_n=self.top_n)

    def fit(self, corpus: Corpus, queries):
        mc = self.model_config or ModelConfig(node_in_dim=corpus.dim, query_in_dim=corpus.dim)
        tc = self.train_config or TrainConfig()
        self.corpus_ = corpus
        self.graphs_ = build_graphs(corpus, self.tau, self.k)
        self.index_ = index_build(corpus)
        r1 = train_stage1(self.graphs_, mc, tc)
        triplets = build_triplets(queries, corpus, self.index_, tc)
        r2 = train_stage2(triplets, self.graphs_, r1.params, mc, tc)
        self.params_, self.model_config_ = r2.params, mc
        self.train_log_ = r1.log + r2.log
        self.fusion_: FusionModel = None
        if self.use_fusion:
            X, y = fusion_training_rows(queries, corpus, self.graphs_, self.params_, mc,
                                        self.index_, self._opts(), tc.overlap_threshold)
            self.fusion_ = fusion_fit(X, y)
        return self

    def retrieve(self, query) -> list:
        check_is_fitted(self, "params_")
        return retrieve(query, self.graphs_, self.params_, self.model_config_, self.index_,
                        self.fusion_, self._opts())

    def _rank(self, query):
        return [r.ref for r in self.retrieve(query)]
