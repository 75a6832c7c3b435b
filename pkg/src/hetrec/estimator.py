"""scikit-learn style wrapper around the training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import EvalConfig, evaluate
from .graph import build_graph
from .models import ModelConfig
from .ps import ParamServer
from .trainer import PipelineConfig, TrainConfig, Trainer, embed_nodes, warm_start
from .validation import check_edges, check_nodes, check_positive_ints
from .walks import WalkConfig, parse_metapath


class HetGraphEmbedding(TransformerMixin, BaseEstimator):
    """Learn node embeddings of a heterogeneous graph from metapath walks.

    ``fit`` takes edge rows ``(edge_type, src_id, dst_id)``. ``transform``
    maps node ids to their final representations. ``predict`` returns the
    top ``n_recommendations`` items per user by inner product, where users
    and items are the endpoint types of the first metapath step.

    Parameters mirror the run configuration keys of the command-line driver.
    """

    def __init__(self, schema=("u2click2i",), metapaths=("u2click2i - i2click2u",), model="walk_only",
                 layers=2, dim=64, alpha=0.0, phi="uniform", walk_len=24, walks_per_node=1, win_size=2,
                 fanouts=(10, 10), order="ego_first", batch_size=1000, pair_budget=None, epochs=1,
                 sparse_lr=0.1, neg_mode="in_batch", neg_num=5, neg_dist="uniform", num_shards=1,
                 warm_start_path=None, n_recommendations=100, seed=0):
        self.schema = schema
        self.metapaths = metapaths
        self.model = model
        self.layers = layers
        self.dim = dim
        self.alpha = alpha
        self.phi = phi
        self.walk_len = walk_len
        self.walks_per_node = walks_per_node
        self.win_size = win_size
        self.fanouts = fanouts
        self.order = order
        self.batch_size = batch_size
        self.pair_budget = pair_budget
        self.epochs = epochs
        self.sparse_lr = sparse_lr
        self.neg_mode = neg_mode
        self.neg_num = neg_num
        self.neg_dist = neg_dist
        self.num_shards = num_shards
        self.warm_start_path = warm_start_path
        self.n_recommendations = n_recommendations
        self.seed = seed

    def fit(self, X, y=None):
        edges = check_edges(X)
        fanouts = check_positive_ints("fanouts", self.fanouts)
        g = build_graph(list(self.schema), edges)
        mps = [parse_metapath(m, g) for m in self.metapaths]
        mcfg = ModelConfig(self.model, self.layers, self.dim, self.alpha, self.phi,
                           tuple(g.relation_names) if self.model != "walk_only" else ())
        tcfg = TrainConfig(batch_size=self.batch_size, pair_budget=self.pair_budget, epochs=self.epochs,
                           sparse_lr=self.sparse_lr, neg_mode=self.neg_mode, neg_num=self.neg_num,
                           neg_dist=self.neg_dist, seed=self.seed, log_every=10**9)
        ps = ParamServer.local(self.num_shards, self.dim, self.seed)
        if self.warm_start_path:
            warm_start(ps, self.warm_start_path)
        trainer = Trainer(g, mcfg, tcfg, ps)
        result = trainer.fit(WalkConfig(mps, self.walk_len, self.walks_per_node, self.seed),
                             PipelineConfig(self.win_size, fanouts, self.order))
        step = mps[0].steps[0]
        self.graph_ = g
        self.ps_ = ps
        self.params_ = result.params
        self.model_config_ = mcfg
        self.stats_ = result.stats
        self.user_type_, self.item_type_, self._history_edge = step.src_type, step.dst_type, step.name
        return self

    def _embed(self, node_type):
        return embed_nodes(self.graph_, self.ps_, self.model_config_, self.params_, node_type,
                           tuple(self.fanouts), self.seed)

    def transform(self, X):
        """Representations of the given nodes; 1-D ids are taken as users."""
        check_is_fitted(self, "graph_")
        node_type, idx = check_nodes(X, self.graph_, self.user_type_)
        return self._embed(node_type)[idx]

    def predict(self, X):
        """Top item ids per user, excluding items the user trained on."""
        check_is_fitted(self, "graph_")
        g = self.graph_
        _, users = check_nodes(X, g, self.user_type_)
        U = self._embed(self.user_type_)
        items = self._embed(self.item_type_)
        cfg = EvalConfig(K=self.n_recommendations, strategy="u2i")
        history = {int(u): g.neighbors(int(u), self._history_edge).tolist() for u in users}
        # every user gets a dummy truth entry so evaluate() scores all of them
        _, recs = evaluate(U, items, history, {int(u): {-1} for u in users}, cfg)
        return [[g.node_id(self.item_type_, i) for i in recs[int(u)]] for u in users]

    def score(self, X, y):
        """Mean recall@``n_recommendations`` of ``predict(X)`` against item sets ``y``."""
        recs = self.predict(X)
        hits = [len(set(r) & set(t)) / len(t) for r, t in zip(recs, y) if len(t)]
        return float(np.mean(hits)) if hits else 0.0
