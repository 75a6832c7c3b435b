"""Skip-gram objective with random or in-batch negatives, the training loop,
and warm start."""

from __future__ import annotations

import enum
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np
from scipy.special import expit

from .graph import HetGraph, TYPE_SHIFT
from .models import DENSE_KEY_BIT, Adam, DenseParams, ModelConfig, RelationalGNN, feature_matrix
from .ps import ParamServer, TransportError, read_checkpoint
from .rng import hash_combine
from .sampling import DEFAULT_FANOUTS, PairBatch, PipelineMode, PipelineOrder, sample_egos, stream_training_batches
from .walks import WalkConfig, generate_walks

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def softplus(x):
    x = np.asarray(x)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def score(h_v, h_u) -> float:
    h_v, h_u = np.asarray(h_v), np.asarray(h_u)
    if h_v.shape != h_u.shape:
        raise ValueError("score needs equal dims")
    return float(h_v @ h_u)


def loss_explicit(h_v, h_u, negatives):
    """Loss of one positive pair against ``M`` explicit negatives.

    ``-log sigma(h_v.h_u) - sum_m log sigma(-h_v.n_m)``; the negatives stand
    in for the context node. Returns ``(loss, (g_v, g_u, g_neg))``.
    """
    h_v = np.asarray(h_v)
    h_u = np.asarray(h_u)
    negatives = np.atleast_2d(np.asarray(negatives))
    y_pos = h_v @ h_u
    y_neg = negatives @ h_v
    loss = softplus(-y_pos) + softplus(y_neg).sum()
    c_pos = -expit(-y_pos)
    c_neg = expit(y_neg)
    g_v = c_pos * h_u + c_neg @ negatives
    g_u = c_pos * h_v
    g_neg = c_neg[:, None] * h_v[None, :]
    return float(loss), (g_v, g_u, g_neg)


def _batched_explicit(H_v, H_u, N):
    """Mean loss over rows; ``N`` is (B, M, d). Gradients of the mean."""
    B = len(H_v)
    y_pos = np.einsum("bd,bd->b", H_v, H_u)
    y_neg = np.einsum("bmd,bd->bm", N, H_v)
    loss = (softplus(-y_pos) + softplus(y_neg).sum(axis=1)).mean()
    c_pos = (-expit(-y_pos) / B)[:, None]
    c_neg = expit(y_neg) / B
    g_v = c_pos * H_u + np.einsum("bm,bmd->bd", c_neg, N)
    g_u = c_pos * H_v
    g_n = c_neg[:, :, None] * H_v[:, None, :]
    return float(loss), g_v, g_u, g_n


def sample_inbatch_negatives(B: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """(B, M) distinct indices per row, none equal to the row index."""
    if B < 2:
        raise ConfigError("in-batch negatives need a batch of at least 2 pairs")
    if M > B - 1:
        raise ConfigError(f"cannot draw {M} in-batch negatives from {B - 1} other rows")
    if 4 * M > B - 1:
        # dense draw: rejection would rarely succeed when M is close to B - 1
        idx = np.argpartition(rng.random((B, B - 1)), M - 1, axis=1)[:, :M]
        return idx + (idx >= np.arange(B)[:, None])
    idx = rng.integers(0, B - 1, size=(B, M))
    while True:
        s = np.sort(idx, axis=1)
        dup = (s[:, 1:] == s[:, :-1]).any(axis=1) if M > 1 else np.zeros(B, bool)
        if not dup.any():
            break
        idx[dup] = rng.integers(0, B - 1, size=(int(dup.sum()), M))
    rows = np.arange(B)[:, None]
    return idx + (idx >= rows)


def loss_inbatch(H_v, H_u, M: int, rng: np.random.Generator | None = None, neg_index=None):
    """Mean loss where each row's negatives are other rows' contexts.

    Returns ``(loss, g_v, g_u, neg_index)``; gradients are of the mean and a
    context used as a negative collects gradient from every row that drew it.
    """
    H_v = np.asarray(H_v)
    H_u = np.asarray(H_u)
    B = len(H_v)
    if neg_index is None:
        neg_index = sample_inbatch_negatives(B, M, rng if rng is not None else np.random.default_rng())
    neg_index = np.asarray(neg_index)
    if B < 2:
        raise ConfigError("in-batch negatives need a batch of at least 2 pairs")
    loss, g_v, g_u, g_n = _batched_explicit(H_v, H_u, H_u[neg_index])
    np.add.at(g_u, neg_index.reshape(-1), g_n.reshape(-1, H_u.shape[1]))
    return loss, g_v, g_u, neg_index


class NegMode(enum.Enum):
    RANDOM = "random"
    IN_BATCH = "in_batch"


class NegDistribution(enum.Enum):
    UNIFORM = "uniform"
    DEGREE075 = "degree075"


class NegativeSampler:
    """Random negatives drawn from nodes of the context node's type.

    Draws equal to the positive context are rejected and redrawn.
    """

    def __init__(self, g: HetGraph, num_negatives: int = 5,
                 distribution: NegDistribution | str = NegDistribution.UNIFORM):
        if num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        self.g = g
        self.M = num_negatives
        self.distribution = NegDistribution(distribution)
        self._cdf: dict[int, np.ndarray] = {}
        if self.distribution is NegDistribution.DEGREE075:
            for t in g.node_types:
                deg = np.zeros(g.num_nodes(t))
                for rel in g.relations:
                    if rel.src_type == t:
                        deg += np.diff(g.csr(rel.name)[0])
                w = deg ** 0.75
                if w.sum() == 0:
                    w = np.ones_like(w)
                self._cdf[g.type_ordinal(t)] = np.cumsum(w) / w.sum()

    def _draw(self, t: int, n: int, rng) -> np.ndarray:
        if self.distribution is NegDistribution.UNIFORM:
            size = self.g.num_nodes(self.g.node_types[t])
            return rng.integers(0, size, n)
        cdf = self._cdf[t]
        return np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)

    def sample(self, context_keys: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        context_keys = np.asarray(context_keys, dtype=np.int64)
        out = np.empty((len(context_keys), self.M), dtype=np.int64)
        types = context_keys >> TYPE_SHIFT
        for t in np.unique(types):
            rows = np.nonzero(types == t)[0]
            n_nodes = self.g.num_nodes(self.g.node_types[int(t)])
            base = np.int64(int(t)) << TYPE_SHIFT
            if n_nodes < 2:
                raise ConfigError(f"cannot draw negatives: type {self.g.node_types[int(t)]!r} has < 2 nodes")
            draws = self._draw(int(t), len(rows) * self.M, rng).reshape(len(rows), self.M) + base
            bad = draws == context_keys[rows, None]
            while bad.any():
                draws[bad] = self._draw(int(t), int(bad.sum()), rng) + base
                bad = draws == context_keys[rows, None]
            out[rows] = draws
        return out


@dataclass
class PipelineConfig:
    win_size: int = 2
    fanouts: tuple[int, ...] = DEFAULT_FANOUTS
    order: PipelineMode = PipelineMode.EGO_FIRST

    def __post_init__(self):
        self.order = PipelineMode(self.order)
        self.fanouts = tuple(int(f) for f in self.fanouts)
        if self.win_size < 1:
            raise ConfigError("win_size must be >= 1")
        if not self.fanouts or min(self.fanouts) < 1:
            raise ConfigError("fanouts must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 1000
    pair_budget: int | None = None
    epochs: int = 1
    sparse_lr: float = 0.1
    dense_lr: float = 1e-3
    neg_mode: NegMode = NegMode.IN_BATCH
    neg_num: int = 5
    neg_dist: NegDistribution = NegDistribution.UNIFORM
    seed: int = 0
    workers: int = 1
    log_every: int = 100
    dtype: str = "float32"
    retries: int = 3
    abort_checkpoint: str | None = None

    def __post_init__(self):
        self.neg_mode = NegMode(self.neg_mode)
        self.neg_dist = NegDistribution(self.neg_dist)
        if self.batch_size < 1 or self.neg_num < 1 or self.epochs < 1 or self.workers < 1:
            raise ConfigError("batch_size, neg_num, epochs and workers must be positive")
        if self.pair_budget is not None and self.pair_budget < 0:
            raise ConfigError("pair_budget must be >= 0")
        if self.neg_mode is NegMode.IN_BATCH and self.batch_size < 2:
            raise ConfigError("in-batch negatives require batch_size >= 2")
        if self.neg_mode is NegMode.IN_BATCH and self.neg_num > self.batch_size - 1:
            raise ConfigError("neg_num must be <= batch_size - 1 for in-batch negatives")


@dataclass
class TrainStats:
    steps: int = 0
    pairs: int = 0
    pull_requests: int = 0
    pulled_key_slots: int = 0
    negative_only_pull_slots: int = 0
    pushed_keys: int = 0
    seconds: float = 0.0
    metrics: list = field(default_factory=list)

    @property
    def pairs_per_sec(self) -> float:
        return self.pairs / self.seconds if self.seconds > 0 else 0.0


@dataclass
class TrainResult:
    model: RelationalGNN | None
    params: DenseParams
    stats: TrainStats


class Trainer:
    """Pull -> forward -> loss -> backward -> push over a pair stream."""

    def __init__(self, g: HetGraph, model_cfg: ModelConfig, train_cfg: TrainConfig, ps: ParamServer,
                 params: DenseParams | None = None):
        if ps.dim != model_cfg.dim:
            raise ConfigError(f"parameter server dim {ps.dim} != model dim {model_cfg.dim}")
        self.g = g
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.ps = ps
        self.dtype = np.dtype(train_cfg.dtype)
        if params is None:
            params = DenseParams.init(model_cfg, hash_combine(train_cfg.seed, 1) & 0xFFFFFFFF, self.dtype)
        self.params = params
        self.model = RelationalGNN(model_cfg, params) if model_cfg.is_gnn else None
        self.adam = Adam(train_cfg.dense_lr)
        self.sampler = NegativeSampler(g, train_cfg.neg_num, train_cfg.neg_dist) \
            if train_cfg.neg_mode is NegMode.RANDOM else None
        self.stats = TrainStats()
        # set from another thread (e.g. a signal handler) to end fit() after the current batch
        self.stop = threading.Event()

    # one batch --------------------------------------------------------------
    def compute(self, batch: PairBatch, rng: np.random.Generator):
        """Pull, forward, backward and push sparse gradients for one batch.

        Returns ``(loss, dense_grads)``; dense grads are of the mean loss.
        """
        cfg, mcfg, g = self.cfg, self.model_cfg, self.g
        B = len(batch)
        neg_keys = self.sampler.sample(batch.context_keys, rng) if self.sampler is not None else None

        key_sets = []
        if self.model is not None:
            _, inverse, ego_sparse, A_ego = self.model.prepare(g, batch.egos)
            key_sets.append(ego_sparse)
        else:
            node_uniq, node_inv = np.unique(np.concatenate([batch.center_keys, batch.context_keys]),
                                            return_inverse=True)
            node_sparse, A_node = feature_matrix(g, node_uniq, mcfg.use_side_info)
            key_sets.append(node_sparse)
        if neg_keys is not None:
            neg_uniq, neg_inv = np.unique(neg_keys, return_inverse=True)
            neg_sparse, A_neg = feature_matrix(g, neg_uniq, mcfg.use_side_info)
            key_sets.append(neg_sparse)
            self.stats.negative_only_pull_slots += neg_keys.size
        all_keys = np.unique(np.concatenate(key_sets))
        self.stats.pull_requests += 1
        self.stats.pulled_key_slots += len(all_keys)
        X = self.ps.pull(all_keys.astype(np.uint64)).astype(self.dtype)

        def rows(keys):
            return np.searchsorted(all_keys, keys)

        if self.model is not None:
            out, tape = self.model.forward_batch(g, batch.egos, lambda k: X[rows(k)], dtype=self.dtype)
            H_v, H_u = out[batch.center_ego], out[batch.context_ego]
        else:
            h0 = np.asarray(A_node @ X[rows(node_sparse)], dtype=self.dtype)
            H_v, H_u = h0[node_inv[:B]], h0[node_inv[B:]]

        if neg_keys is None:
            loss, g_v, g_u, _ = loss_inbatch(H_v, H_u, cfg.neg_num, rng)
        else:
            h0_neg = np.asarray(A_neg @ X[rows(neg_sparse)], dtype=self.dtype)
            loss, g_v, g_u, g_n = _batched_explicit(H_v, H_u, h0_neg[neg_inv.reshape(neg_keys.shape)])

        grad = np.zeros_like(X)
        dense_grads = None
        if self.model is not None:
            g_out = np.zeros_like(out)
            np.add.at(g_out, batch.center_ego, g_v)
            np.add.at(g_out, batch.context_ego, g_u)
            g_sparse, dense_grads = self.model.backward(g_out, tape)
            np.add.at(grad, rows(ego_sparse), g_sparse)
        else:
            g_h0 = np.zeros((len(node_uniq), X.shape[1]), dtype=self.dtype)
            np.add.at(g_h0, node_inv[:B], g_v)
            np.add.at(g_h0, node_inv[B:], g_u)
            np.add.at(grad, rows(node_sparse), np.asarray(A_node.T @ g_h0))
        if neg_keys is not None:
            g_hn = np.zeros((len(neg_uniq), X.shape[1]), dtype=self.dtype)
            np.add.at(g_hn, neg_inv.reshape(-1), g_n.reshape(-1, X.shape[1]))
            np.add.at(grad, rows(neg_sparse), np.asarray(A_neg.T @ g_hn))
        # sparse steps are per pair, so undo the 1/B of the mean loss
        grad *= B
        self.ps.push(all_keys.astype(np.uint64), grad.astype(np.float32), lr=cfg.sparse_lr)
        self.stats.pushed_keys += len(all_keys)
        return loss, dense_grads

    def _compute_with_retry(self, batch, rng):
        for attempt in range(self.cfg.retries + 1):
            try:
                return self.compute(batch, rng)
            except TransportError:
                if attempt == self.cfg.retries:
                    if self.cfg.abort_checkpoint:
                        try:
                            self.ps.save(self.cfg.abort_checkpoint)
                        except TransportError:
                            log.error("could not write abort checkpoint %s", self.cfg.abort_checkpoint)
                    raise
                time.sleep(0.05 * 2 ** attempt)

    # loop -----------------------------------------------------------------
    def batches(self, walk_cfg: WalkConfig, pipe_cfg: PipelineConfig, order: PipelineOrder | None = None):
        budget = self.cfg.pair_budget
        emitted = 0
        epoch = 0
        order = order if order is not None else PipelineOrder(pipe_cfg.order)
        while True:
            if budget is None and epoch >= self.cfg.epochs:
                return
            if budget is not None and emitted >= budget:
                return
            rng = np.random.default_rng(hash_combine(self.cfg.seed, epoch, 2))
            got_any = False
            for batch in stream_training_batches(
                    self.g, generate_walks(self.g, walk_cfg, epoch), pipe_cfg.win_size, pipe_cfg.fanouts,
                    order, self.cfg.batch_size, self.model_cfg.relations or None, rng,
                    walk_only=not self.model_cfg.is_gnn):
                if budget is not None and emitted + len(batch) > budget:
                    batch = batch.slice(0, budget - emitted)
                if self.cfg.neg_mode is NegMode.IN_BATCH and len(batch) < 2:
                    continue
                if len(batch):
                    got_any = True
                    emitted += len(batch)
                    yield batch
                if budget is not None and emitted >= budget:
                    return
            if not got_any:
                return
            epoch += 1

    def fit(self, walk_cfg: WalkConfig, pipe_cfg: PipelineConfig, metrics: TextIO | None = None,
            callback: Callable[[int], None] | None = None, callback_every: int | None = None,
            order: PipelineOrder | None = None) -> TrainResult:
        stats = self.stats
        start = time.perf_counter()
        loss_window: list[float] = []
        next_cb = callback_every
        if self.cfg.workers > 1:
            results = self._fit_parallel(walk_cfg, pipe_cfg, order)
        else:
            results = ((b, self._compute_with_retry(b, self._rng(i))) for i, b in
                       enumerate(self.batches(walk_cfg, pipe_cfg, order)))
        for batch, (loss, dense_grads) in results:
            if self.stop.is_set():
                break
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss is not finite at step {stats.steps + 1}; "
                                         f"lower sparse_lr (now {self.cfg.sparse_lr}) or raise batch diversity")
            if dense_grads:
                self.adam.step(self.params, dense_grads)
            stats.steps += 1
            stats.pairs += len(batch)
            loss_window.append(loss)
            stats.seconds = time.perf_counter() - start
            if stats.steps % self.cfg.log_every == 0:
                self._log(stats, loss_window, metrics)
                loss_window = []
            if callback is not None and next_cb is not None and stats.pairs >= next_cb:
                callback(stats.pairs)
                while next_cb <= stats.pairs:
                    next_cb += callback_every
        stats.seconds = time.perf_counter() - start
        if loss_window:
            self._log(stats, loss_window, metrics)
        return TrainResult(self.model, self.params, stats)

    def _rng(self, step):
        return np.random.default_rng(hash_combine(self.cfg.seed, step, 3))

    def _fit_parallel(self, walk_cfg, pipe_cfg, order):
        # hogwild over sparse params; dense updates stay on the calling thread
        with ThreadPoolExecutor(self.cfg.workers) as pool:
            pending = []
            for i, batch in enumerate(self.batches(walk_cfg, pipe_cfg, order)):
                pending.append((batch, pool.submit(self._compute_with_retry, batch, self._rng(i))))
                if len(pending) >= 2 * self.cfg.workers:
                    b, fut = pending.pop(0)
                    yield b, fut.result()
            for b, fut in pending:
                yield b, fut.result()

    def _log(self, stats, losses, fh):
        row = {"step": stats.steps, "pairs_done": stats.pairs, "loss": float(np.mean(losses)),
               "pairs_per_sec": stats.pairs_per_sec}
        stats.metrics.append(row)
        if fh is not None:
            fh.write(f"{row['step']}\t{row['pairs_done']}\t{row['loss']:.6f}\t{row['pairs_per_sec']:.1f}\n")
            fh.flush()
        log.info("step %d pairs %d loss %.4f %.0f pairs/s", row["step"], row["pairs_done"], row["loss"],
                 row["pairs_per_sec"])


def train(g: HetGraph, walk_cfg: WalkConfig, pipe_cfg: PipelineConfig, model_cfg: ModelConfig,
          train_cfg: TrainConfig, ps: ParamServer, params: DenseParams | None = None,
          metrics: TextIO | None = None, **fit_kwargs) -> TrainResult:
    """Run the full walk -> pair -> (ego) -> GNN training pipeline."""
    return Trainer(g, model_cfg, train_cfg, ps, params).fit(walk_cfg, pipe_cfg, metrics, **fit_kwargs)


def warm_start(ps: ParamServer, path) -> int:
    """Load every sparse entry of a checkpoint into ``ps``; returns the count.

    Keys not in the checkpoint keep lazy initialization. Entries in the dense
    key region are skipped.
    """
    keys, vecs = read_checkpoint(path, expect_dim=ps.dim)
    sparse = (keys & np.uint64(DENSE_KEY_BIT)) == 0
    keys, vecs = keys[sparse], vecs[sparse]
    if all(hasattr(s, "set") for s in ps.shards):
        ps.set(keys, vecs)
    else:
        from .ps import write_checkpoint
        tmp = f"{path}.sparse"
        write_checkpoint(tmp, ps.dim, keys, vecs)
        ps.load(tmp)
    return int(len(keys))


def embed_nodes(g: HetGraph, ps: ParamServer, model_cfg: ModelConfig, params: DenseParams | None,
                node_type: str, fanouts: Sequence[int] = DEFAULT_FANOUTS, seed: int = 0,
                batch_size: int = 2048) -> np.ndarray:
    """Final representations of every node of ``node_type``, by dense index.

    GNN models encode a freshly sampled ego graph per node.
    """
    keys = g.keys(node_type)
    out = np.zeros((len(keys), model_cfg.dim), dtype=np.float64)
    model = RelationalGNN(model_cfg, params) if model_cfg.is_gnn else None
    rng = np.random.default_rng(hash_combine(seed, 4))
    for lo in range(0, len(keys), batch_size):
        chunk = keys[lo:lo + batch_size]
        if model is None:
            sparse, A = feature_matrix(g, chunk, model_cfg.use_side_info)
            out[lo:lo + len(chunk)] = A @ ps.pull(sparse.astype(np.uint64)).astype(np.float64)
            continue
        egos = sample_egos(g, chunk, model_cfg.relations, fanouts, rng)
        _, _, sparse, _ = model.prepare(g, egos)
        X = ps.pull(sparse.astype(np.uint64)).astype(np.float64)
        order = np.argsort(sparse)
        lookup = lambda k: X[order[np.searchsorted(sparse[order], k)]]
        h, _ = model.forward_batch(g, egos, lookup, dtype=np.float64)
        out[lo:lo + len(chunk)] = h
    return out
