"""Pair generation, relation-wise ego-graph sampling and the batch pipeline.

Ego graphs are handled in batches: an :class:`EgoBatch` stores, for every
relation, the sampled layers of many egos as flat key arrays with parent
pointers. :class:`EgoGraph` is the single-ego view of the same layout.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np

from .graph import INDEX_MASK, TYPE_SHIFT, HetGraph

DEFAULT_FANOUTS = (10, 10)


# -- pairs ---------------------------------------------------------------------

@lru_cache(maxsize=256)
def _pair_template(length: int, win_size: int) -> np.ndarray:
    if length <= 1:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.meshgrid(np.arange(length), np.arange(length), indexing="ij")
    d = np.abs(i - j)
    mask = (d >= 1) & (d <= win_size)
    out = np.stack([i[mask], j[mask]], axis=1).astype(np.int64)
    out.setflags(write=False)
    return out


def gen_pairs(path: Sequence[int], win_size: int) -> list[tuple[int, int]]:
    """All position pairs ``(i, j)`` with ``1 <= |i - j| <= win_size``."""
    if win_size < 1:
        raise ValueError("win_size must be >= 1")
    return [tuple(p) for p in _pair_template(len(path), win_size).tolist()]


# -- ego graphs ------------------------------------------------------------------

@dataclass
class RelationLayers:
    nodes: np.ndarray         # flattened node keys, layer by layer
    layer_offsets: np.ndarray  # layer k occupies nodes[layer_offsets[k]:layer_offsets[k+1]]
    edges: np.ndarray          # (m, 2) index pairs (parent, child) into ``nodes``

    def layer(self, k: int) -> np.ndarray:
        return self.nodes[self.layer_offsets[k]:self.layer_offsets[k + 1]]


@dataclass
class EgoGraph:
    center: int
    depth: int
    fanouts: tuple[int, ...]
    per_relation: dict[str, RelationLayers]

    def layers(self, relation: str) -> list[np.ndarray]:
        rl = self.per_relation[relation]
        return [rl.layer(k) for k in range(self.depth + 1)]


@dataclass
class _Layer:
    keys: np.ndarray    # node keys of this layer, grouped by ego
    parent: np.ndarray  # index into the previous layer's keys
    ptr: np.ndarray     # ptr[e]:ptr[e+1] is ego e's slice


@dataclass
class EgoBatch:
    centers: np.ndarray
    relations: tuple[str, ...]
    fanouts: tuple[int, ...]
    layers: dict[str, list[_Layer]]  # layers[r][k-1] holds hop k, k = 1..K

    @property
    def depth(self) -> int:
        return len(self.fanouts)

    def __len__(self):
        return len(self.centers)

    def num_nodes(self) -> int:
        return len(self.centers) + sum(len(l.keys) for ls in self.layers.values() for l in ls)

    def all_keys(self) -> np.ndarray:
        parts = [self.centers] + [l.keys for ls in self.layers.values() for l in ls]
        return np.concatenate(parts)

    def ego(self, e: int) -> EgoGraph:
        per_relation = {}
        for r in self.relations:
            nodes = [self.centers[e:e + 1]]
            edges = []
            base_prev = 0
            prev_lo = e
            count = 1
            for layer in self.layers[r]:
                lo, hi = layer.ptr[e], layer.ptr[e + 1]
                nodes.append(layer.keys[lo:hi])
                parent_local = layer.parent[lo:hi] - prev_lo + base_prev
                child_local = np.arange(hi - lo) + count
                edges.append(np.stack([parent_local, child_local], axis=1))
                base_prev = count
                count += hi - lo
                prev_lo = lo
            offsets = np.cumsum([0] + [len(n) for n in nodes])
            per_relation[r] = RelationLayers(
                np.concatenate(nodes), offsets,
                np.concatenate(edges) if edges else np.zeros((0, 2), np.int64))
        return EgoGraph(int(self.centers[e]), self.depth, self.fanouts, per_relation)

    def take(self, idx: np.ndarray) -> "EgoBatch":
        """Sub-batch of egos ``idx`` (repeats allowed), re-indexed."""
        idx = np.asarray(idx, dtype=np.int64)
        layers = {}
        for r in self.relations:
            new_layers = []
            prev_ptr = np.arange(len(self.centers) + 1)
            new_prev_ptr = np.arange(len(idx) + 1)
            for layer in self.layers[r]:
                lo, hi = layer.ptr[idx], layer.ptr[idx + 1]
                sizes = hi - lo
                new_ptr = np.zeros(len(idx) + 1, dtype=np.int64)
                np.cumsum(sizes, out=new_ptr[1:])
                ego_of = np.repeat(np.arange(len(idx)), sizes)
                src = np.arange(new_ptr[-1]) - new_ptr[ego_of] + lo[ego_of]
                old_parent = layer.parent[src]
                parent = old_parent - prev_ptr[idx[ego_of]] + new_prev_ptr[ego_of]
                new_layers.append(_Layer(layer.keys[src], parent, new_ptr))
                prev_ptr, new_prev_ptr = layer.ptr, new_ptr
            layers[r] = new_layers
        return EgoBatch(self.centers[idx], self.relations, self.fanouts, layers)

    @staticmethod
    def concat(batches: Sequence["EgoBatch"]) -> "EgoBatch":
        first = batches[0]
        if len(batches) == 1:
            return first
        layers = {}
        for r in first.relations:
            out = []
            prev_sizes = [len(b.centers) for b in batches]
            for k in range(first.depth):
                keys, parents, ptrs = [], [], [np.zeros(1, np.int64)]
                node_base = 0
                parent_base = 0
                for b, psize in zip(batches, prev_sizes):
                    layer = b.layers[r][k]
                    keys.append(layer.keys)
                    parents.append(layer.parent + parent_base)
                    ptrs.append(layer.ptr[1:] + node_base)
                    node_base += len(layer.keys)
                    parent_base += psize
                out.append(_Layer(np.concatenate(keys), np.concatenate(parents), np.concatenate(ptrs)))
                prev_sizes = [len(b.layers[r][k].keys) for b in batches]
            layers[r] = out
        return EgoBatch(np.concatenate([b.centers for b in batches]), first.relations, first.fanouts, layers)


def _sample_children(g: HetGraph, frontier: np.ndarray, relation: str, fanout: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to ``fanout`` distinct neighbor slots for each frontier key."""
    n = len(frontier)
    deg = np.zeros(n, dtype=np.int64)
    start = np.zeros(n, dtype=np.int64)
    # neighbor keys live in per-type arrays; gather them through one flat view
    pools, pool_base = [], 0
    base_of = np.zeros(n, dtype=np.int64)
    types = frontier >> TYPE_SHIFT
    for t in np.unique(types):
        csr = g.relation_csr(relation, int(t))
        if csr is None:
            continue
        offsets, keys = csr
        sel = np.nonzero(types == t)[0]
        local = frontier[sel] & INDEX_MASK
        deg[sel] = offsets[local + 1] - offsets[local]
        start[sel] = offsets[local]
        base_of[sel] = pool_base
        pools.append(keys)
        pool_base += len(keys)
    if not pools or not deg.any():
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    pool = pools[0] if len(pools) == 1 else np.concatenate(pools)
    take = np.minimum(deg, fanout)
    parent = np.repeat(np.arange(n), take)
    out_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(take, out=out_ptr[1:])
    slot = np.empty(out_ptr[-1], dtype=np.int64)

    full = deg <= fanout
    if full.any():
        f_nodes = np.nonzero(full & (deg > 0))[0]
        f_sizes = deg[f_nodes]
        f_owner = np.repeat(f_nodes, f_sizes)
        f_rank = np.arange(f_sizes.sum()) - np.repeat(np.cumsum(f_sizes) - f_sizes, f_sizes)
        slot[out_ptr[f_owner] + f_rank] = start[f_owner] + f_rank

    big = np.nonzero(~full)[0]
    if len(big):
        b_sizes = deg[big]
        owner = np.repeat(np.arange(len(big)), b_sizes)
        rank_in_seg = np.arange(b_sizes.sum()) - np.repeat(np.cumsum(b_sizes) - b_sizes, b_sizes)
        order = np.lexsort((rng.random(len(owner)), owner))
        seg_start = np.repeat(np.cumsum(b_sizes) - b_sizes, b_sizes)
        pos_in_seg = np.arange(len(order)) - seg_start
        keep = pos_in_seg < fanout
        chosen = rank_in_seg[order][keep]
        chosen_owner = owner[order][keep]
        nodes = big[chosen_owner]
        slot[out_ptr[nodes] + pos_in_seg[keep]] = start[nodes] + chosen
    keys = pool[slot + base_of[parent]]
    return keys, parent


class PipelineMode(enum.Enum):
    PAIR_FIRST = "pair_first"
    EGO_FIRST = "ego_first"


@dataclass
class PipelineOrder:
    mode: PipelineMode = PipelineMode.EGO_FIRST
    ego_sample_counter: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = PipelineMode(self.mode)

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self.ego_sample_counter += n


def sample_egos(g: HetGraph, centers: np.ndarray, relations: Sequence[str],
                fanouts: Sequence[int], rng: np.random.Generator,
                counter: PipelineOrder | None = None) -> EgoBatch:
    """Sample one relation-wise ego graph per center key.

    Equivalent to calling :func:`sample_ego` once per center; the counter is
    advanced by ``len(centers)``.
    """
    fanouts = tuple(int(f) for f in fanouts)
    if not fanouts or min(fanouts) < 1:
        raise ValueError("fanouts must be a non-empty list of positive integers")
    centers = np.asarray(centers, dtype=np.int64)
    layers = {}
    for r in relations:
        frontier = centers
        frontier_ptr = np.arange(len(centers) + 1, dtype=np.int64)
        rl = []
        for f in fanouts:
            keys, parent = _sample_children(g, frontier, r, f, rng)
            # children follow frontier order, so each ego's slice stays contiguous
            parent_ptr = np.searchsorted(parent, frontier_ptr, side="left")
            rl.append(_Layer(keys, parent, parent_ptr.astype(np.int64)))
            frontier, frontier_ptr = keys, parent_ptr
        layers[r] = rl
    if counter is not None:
        counter.increment(len(centers))
    return EgoBatch(centers, tuple(relations), fanouts, layers)


def sample_ego(g: HetGraph, v: int, relations: Sequence[str], fanouts: Sequence[int],
               rng: np.random.Generator, counter: PipelineOrder | None = None) -> EgoGraph:
    """Relation-wise ego graph of node key ``v``.

    Each hop samples ``min(fanout, degree)`` distinct neighbor slots per
    frontier node, uniformly without replacement. A relation that does not
    apply to a frontier node's type contributes nothing.
    """
    return sample_egos(g, np.asarray([v]), relations, fanouts, rng, counter).ego(0)


# -- pipeline --------------------------------------------------------------------

@dataclass
class TrainPair:
    center: int
    context: int
    path_id: int
    positions: tuple[int, int]
    center_ego: EgoGraph | None = None
    context_ego: EgoGraph | None = None


@dataclass
class PairBatch:
    center_keys: np.ndarray
    context_keys: np.ndarray
    path_ids: np.ndarray
    positions: np.ndarray
    egos: EgoBatch | None = None
    center_ego: np.ndarray | None = None
    context_ego: np.ndarray | None = None

    def __len__(self):
        return len(self.center_keys)

    def pairs(self) -> Iterator[TrainPair]:
        for p in range(len(self)):
            ce = xe = None
            if self.egos is not None:
                ce = self.egos.ego(int(self.center_ego[p]))
                xe = self.egos.ego(int(self.context_ego[p]))
            yield TrainPair(int(self.center_keys[p]), int(self.context_keys[p]), int(self.path_ids[p]),
                            tuple(int(x) for x in self.positions[p]), ce, xe)

    def slice(self, lo: int, hi: int) -> "PairBatch":
        sl = slice(lo, hi)
        if self.egos is None:
            return PairBatch(self.center_keys[sl], self.context_keys[sl], self.path_ids[sl], self.positions[sl])
        ce, xe = self.center_ego[sl], self.context_ego[sl]
        used, inverse = np.unique(np.concatenate([ce, xe]), return_inverse=True)
        return PairBatch(self.center_keys[sl], self.context_keys[sl], self.path_ids[sl], self.positions[sl],
                         self.egos.take(used), inverse[:len(ce)], inverse[len(ce):])

    @staticmethod
    def concat(batches: Sequence["PairBatch"]) -> "PairBatch":
        batches = [b for b in batches if len(b)]
        if len(batches) == 1:
            return batches[0]
        cat = np.concatenate
        out = PairBatch(cat([b.center_keys for b in batches]), cat([b.context_keys for b in batches]),
                        cat([b.path_ids for b in batches]), cat([b.positions for b in batches]))
        if batches[0].egos is not None:
            bases = np.cumsum([0] + [len(b.egos) for b in batches])
            out.egos = EgoBatch.concat([b.egos for b in batches])
            out.center_ego = cat([b.center_ego + o for b, o in zip(batches, bases)])
            out.context_ego = cat([b.context_ego + o for b, o in zip(batches, bases)])
        return out


def _chunk_to_batch(g, paths, first_path_id, win_size, fanouts, relations, order, rng, walk_only):
    lens = np.array([len(p) for p in paths], dtype=np.int64)
    path_base = np.zeros(len(paths) + 1, dtype=np.int64)
    np.cumsum(lens, out=path_base[1:])
    flat_keys = np.concatenate([p.keys for p in paths])
    templates = [_pair_template(int(n), win_size) for n in lens]
    counts = np.array([len(t) for t in templates], dtype=np.int64)
    positions = np.concatenate(templates) if counts.sum() else np.zeros((0, 2), np.int64)
    owner = np.repeat(np.arange(len(paths)), counts)
    gi = path_base[owner] + positions[:, 0]
    gj = path_base[owner] + positions[:, 1]
    batch = PairBatch(flat_keys[gi], flat_keys[gj], first_path_id + owner, positions)
    if walk_only or not len(batch):
        return batch
    if order.mode is PipelineMode.EGO_FIRST:
        batch.egos = sample_egos(g, flat_keys, relations, fanouts, rng, order)
        batch.center_ego, batch.context_ego = gi, gj
    else:
        endpoints = np.empty(2 * len(batch), dtype=np.int64)
        endpoints[0::2] = batch.center_keys
        endpoints[1::2] = batch.context_keys
        batch.egos = sample_egos(g, endpoints, relations, fanouts, rng, order)
        batch.center_ego = np.arange(0, 2 * len(batch), 2)
        batch.context_ego = np.arange(1, 2 * len(batch), 2)
    return batch


def stream_training_batches(
    g: HetGraph,
    walks: Iterable,
    win_size: int,
    fanouts: Sequence[int] = DEFAULT_FANOUTS,
    order: PipelineOrder | None = None,
    batch_size: int = 1000,
    relations: Sequence[str] | None = None,
    rng: np.random.Generator | None = None,
    walk_only: bool = False,
) -> Iterator[PairBatch]:
    """Turn a walk stream into batches of ``batch_size`` training pairs.

    ``PairFirst`` samples an ego graph for both endpoints of every pair;
    ``EgoFirst`` samples one ego per path position and lets pairs share them.
    Both emit the same pair sequence. With ``walk_only`` no egos are sampled.
    The last partial batch is emitted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if win_size < 1:
        raise ValueError("win_size must be >= 1")
    order = order if order is not None else PipelineOrder()
    rng = rng if rng is not None else np.random.default_rng(0)
    relations = tuple(relations) if relations is not None else tuple(g.relation_names)
    pending: PairBatch | None = None
    chunk: list = []
    chunk_pairs = 0
    next_path_id = 0

    def flush(chunk, first_id):
        return _chunk_to_batch(g, chunk, first_id, win_size, fanouts, relations, order, rng, walk_only)

    for path in walks:
        chunk.append(path)
        chunk_pairs += len(_pair_template(len(path), win_size))
        if chunk_pairs >= batch_size:
            new = flush(chunk, next_path_id)
            next_path_id += len(chunk)
            chunk, chunk_pairs = [], 0
            pending = new if pending is None or not len(pending) else PairBatch.concat([pending, new])
            while len(pending) >= batch_size:
                yield pending.slice(0, batch_size)
                pending = pending.slice(batch_size, len(pending))
    if chunk:
        new = flush(chunk, next_path_id)
        pending = new if pending is None or not len(pending) else PairBatch.concat([pending, new])
    while pending is not None and len(pending):
        n = min(batch_size, len(pending))
        yield pending.slice(0, n)
        pending = pending.slice(n, len(pending))
