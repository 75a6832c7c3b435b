"""Relation-wise GNN encoders over sampled ego graphs.

Every node of an ego carries a base vector ``h0`` (its ID embedding plus
mean-pooled side-info slot embeddings). A relation tree of depth ``K`` is
evaluated bottom-up: a node at hop ``j`` gets representations
``h^1 .. h^(K-j)`` from its sampled children, and the center combines the
per-relation results as::

    h^k = alpha * h^0 + (1 - alpha) * sum_r phi_r * GNN_r(h^(k-1), children^(k-1))

Inner tree nodes only see their own relation, so their ``phi`` is 1.
Gradients are computed by an explicit reverse pass (:meth:`RelationalGNN.backward`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import HetGraph
from .sampling import EgoBatch, EgoGraph, RelationLayers, _Layer

SLOT_KEY_BIT = 1 << 62
DENSE_KEY_BIT = 1 << 61


class ModelKind(enum.Enum):
    WALK_ONLY = "walk_only"
    LIGHTGCN = "lightgcn"
    SAGE_MEAN = "sage_mean"
    SAGE_SUM = "sage_sum"


class PhiMode(enum.Enum):
    UNIFORM = "uniform"
    ATTENTION = "attention"


def slot_key(slot: int, value: int) -> int:
    """Parameter key of a side-info value; disjoint from node keys."""
    return SLOT_KEY_BIT | (int(slot) << 32) | int(value)


@dataclass
class ModelConfig:
    model: ModelKind = ModelKind.LIGHTGCN
    layers: int = 2
    dim: int = 64
    alpha: float = 0.0
    phi_mode: PhiMode = PhiMode.UNIFORM
    relations: tuple[str, ...] = ()
    use_side_info: bool = False

    def __post_init__(self):
        self.model = ModelKind(self.model)
        self.phi_mode = PhiMode(self.phi_mode)
        self.relations = tuple(self.relations)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.model is not ModelKind.WALK_ONLY:
            if self.layers < 1:
                raise ValueError("GNN models need layers >= 1")
            if not self.relations:
                raise ValueError("GNN models need at least one relation")

    @property
    def is_gnn(self) -> bool:
        return self.model is not ModelKind.WALK_ONLY

    @property
    def is_sage(self) -> bool:
        return self.model in (ModelKind.SAGE_MEAN, ModelKind.SAGE_SUM)


@dataclass
class NodeFeatureSpec:
    id_key: int
    slot_keys: list[tuple[int, list[int]]] = field(default_factory=list)


def feature_spec(g: HetGraph | None, key: int) -> NodeFeatureSpec:
    if g is None:
        return NodeFeatureSpec(int(key))
    slots = [(slot, [slot_key(slot, v) for v in values]) for slot, values in g.side_info(key)]
    return NodeFeatureSpec(int(key), slots)


def base_embedding(spec: NodeFeatureSpec, pulled: Mapping[int, np.ndarray], use_side_info: bool = True) -> np.ndarray:
    """``h0 = id + sum over slots of mean(slot values)``."""
    h = np.array(pulled[spec.id_key], copy=True)
    if use_side_info:
        for _, keys in spec.slot_keys:
            if keys:
                h = h + np.mean([pulled[k] for k in keys], axis=0)
    return h


def feature_matrix(g: HetGraph | None, node_keys: np.ndarray, use_side_info: bool):
    """Sparse keys needed for ``node_keys`` and the map from them to ``h0``.

    Returns ``(sparse_keys, A)`` with ``h0 = A @ X`` where ``X`` holds the
    pulled vectors of ``sparse_keys`` in order.
    """
    node_keys = np.asarray(node_keys, dtype=np.int64)
    n = len(node_keys)
    if not use_side_info or g is None or not g.has_side_info:
        A = sp.csr_matrix((np.ones(n), (np.arange(n), np.arange(n))), shape=(n, n))
        return node_keys.copy(), A
    index = {int(k): i for i, k in enumerate(node_keys)}
    keys = list(int(k) for k in node_keys)
    rows, cols, vals = list(range(n)), list(range(n)), [1.0] * n
    for r, k in enumerate(node_keys.tolist()):
        for slot, values in g.side_info(k):
            w = 1.0 / len(values)
            for v in values:
                sk = slot_key(slot, v)
                c = index.get(sk)
                if c is None:
                    c = index[sk] = len(keys)
                    keys.append(sk)
                rows.append(r)
                cols.append(c)
                vals.append(w)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(keys)))
    return np.asarray(keys, dtype=np.int64), A


# -- primitive layers ------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relation_layer(model: ModelKind | str, h_center, h_neighbors, params: Mapping | None = None) -> np.ndarray:
    """One relation's message passing step for a single node.

    ``params`` holds ``W_self``, ``W_neigh`` and ``bias`` for the Sage models.
    """
    model = ModelKind(model)
    h_center = np.asarray(h_center)
    neigh = np.asarray(h_neighbors, dtype=h_center.dtype).reshape(-1, h_center.shape[-1])
    if model is ModelKind.LIGHTGCN:
        return neigh.mean(axis=0) if len(neigh) else np.zeros_like(h_center)
    if model is ModelKind.WALK_ONLY:
        raise ValueError("walk-only model has no relation layer")
    if not len(neigh):
        agg = np.zeros_like(h_center)
    elif model is ModelKind.SAGE_MEAN:
        agg = neigh.mean(axis=0)
    else:
        agg = neigh.sum(axis=0)
    return relu(params["W_self"] @ h_center + params["W_neigh"] @ agg + params["bias"])


def attention_weights(per_relation: Sequence[np.ndarray], W, w) -> np.ndarray:
    logits = np.array([w @ np.tanh(W @ h) for h in per_relation])
    z = np.exp(logits - logits.max())
    return z / z.sum()


def relation_combine(h0, per_relation: Mapping[str, np.ndarray], alpha: float,
                     phi_mode: PhiMode | str = PhiMode.UNIFORM, params: Mapping | None = None) -> np.ndarray:
    """Residual combination of per-relation results; ``params`` holds ``W_att``, ``w_att``."""
    phi_mode = PhiMode(phi_mode)
    hs = list(per_relation.values())
    if phi_mode is PhiMode.UNIFORM:
        phi = np.ones(len(hs))
    else:
        phi = attention_weights(hs, params["W_att"], params["w_att"])
    mixed = sum(p * h for p, h in zip(phi, hs))
    return alpha * np.asarray(h0) + (1 - alpha) * mixed


# -- dense parameters ------------------------------------------------------------

class DenseParams(dict):
    """Named dense arrays: ``sage/<relation>/<layer>/{W_self,W_neigh,bias}``
    and ``att/<layer>/{W,w}``."""

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> "DenseParams":
        rng = np.random.default_rng(seed)
        d = cfg.dim
        scale = np.sqrt(6.0 / (2 * d))
        out = cls()
        if cfg.is_sage:
            for r in cfg.relations:
                for k in range(1, cfg.layers + 1):
                    out[f"sage/{r}/{k}/W_self"] = rng.uniform(-scale, scale, (d, d)).astype(dtype)
                    out[f"sage/{r}/{k}/W_neigh"] = rng.uniform(-scale, scale, (d, d)).astype(dtype)
                    out[f"sage/{r}/{k}/bias"] = np.zeros(d, dtype=dtype)
        if cfg.is_gnn and cfg.phi_mode is PhiMode.ATTENTION:
            for k in range(1, cfg.layers + 1):
                out[f"att/{k}/W"] = rng.uniform(-scale, scale, (d, d)).astype(dtype)
                out[f"att/{k}/w"] = rng.uniform(-scale, scale, d).astype(dtype)
        return out

    def sage(self, r: str, k: int) -> dict:
        return {n: self[f"sage/{r}/{k}/{n}"] for n in ("W_self", "W_neigh", "bias")}

    def attention(self, k: int) -> dict:
        return {"W_att": self[f"att/{k}/W"], "w_att": self[f"att/{k}/w"]}

    def astype(self, dtype) -> "DenseParams":
        return DenseParams({k: v.astype(dtype) for k, v in self.items()})

    def zeros_like(self) -> "DenseParams":
        return DenseParams({k: np.zeros_like(v) for k, v in self.items()})

    def to_records(self, relations: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise records for the checkpoint file, keyed in the dense region.

        Key layout: bit 61 set | relation ordinal (16 bits, 0xFFFF for
        attention) << 40 | layer << 32 | matrix id << 24 | row.
        """
        rel_ord = {r: i for i, r in enumerate(relations)}
        keys, rows = [], []
        for name in sorted(self):
            parts = name.split("/")
            if parts[0] == "sage":
                ro, k, m = rel_ord[parts[1]], int(parts[2]), ("W_self", "W_neigh", "bias").index(parts[3])
            else:
                ro, k, m = 0xFFFF, int(parts[1]), 3 + ("W", "w").index(parts[2])
            mat = np.atleast_2d(self[name])
            for i, row in enumerate(mat):
                keys.append(DENSE_KEY_BIT | (ro << 40) | (k << 32) | (m << 24) | i)
                rows.append(row)
        if not keys:
            return np.zeros(0, np.uint64), np.zeros((0, 0), np.float32)
        return np.asarray(keys, dtype=np.uint64), np.asarray(rows, dtype=np.float32)

    @classmethod
    def from_records(cls, keys, rows, relations: Sequence[str]) -> "DenseParams":
        names = ("W_self", "W_neigh", "bias", "W", "w")
        grouped: dict[str, dict[int, np.ndarray]] = {}
        for key, row in zip(np.asarray(keys, dtype=np.uint64).tolist(), rows):
            if not key & DENSE_KEY_BIT:
                continue
            ro, k, m, i = (key >> 40) & 0xFFFF, (key >> 32) & 0xFF, (key >> 24) & 0xFF, key & 0xFFFFFF
            name = f"att/{k}/{names[m]}" if ro == 0xFFFF else f"sage/{relations[ro]}/{k}/{names[m]}"
            grouped.setdefault(name, {})[i] = np.asarray(row, dtype=np.float64)
        out = cls()
        for name, rows_ in grouped.items():
            mat = np.stack([rows_[i] for i in sorted(rows_)])
            out[name] = mat[0] if name.endswith(("bias", "/w")) else mat
        return out


class Adam:
    """Dense Adam held by the trainer."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: DenseParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params[name] -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params[name].dtype)


# -- batched forward / backward --------------------------------------------------

def _segment_matrix(parent: np.ndarray, n_parent: int, mean: bool) -> sp.csr_matrix:
    """Sparse (n_parent x n_child) aggregation matrix; children are grouped by parent."""
    n_child = len(parent)
    ptr = np.searchsorted(parent, np.arange(n_parent + 1)).astype(np.int64)
    if mean:
        counts = np.diff(ptr)
        data = (1.0 / np.maximum(counts, 1))[parent] if n_child else np.zeros(0)
    else:
        data = np.ones(n_child)
    return sp.csr_matrix((data, np.arange(n_child), ptr), shape=(n_parent, n_child))


@dataclass
class _Tape:
    egos: EgoBatch
    K: int
    sparse_keys: np.ndarray
    A: sp.csr_matrix
    node_index: dict  # (r, j) -> positions into the unique node list; ("c",) for centers
    n_unique: int
    h0: np.ndarray
    reps: dict = field(default_factory=dict)      # (r, j, k) -> rep of tree nodes; ("c", k) -> centers
    P: dict = field(default_factory=dict)         # (r, j) -> aggregation matrix from layer j+1 into j
    cache: dict = field(default_factory=dict)     # per-step intermediates
    dtype: type = np.float64


class RelationalGNN:
    """Encoder for one :class:`ModelConfig` with its dense parameters."""

    def __init__(self, cfg: ModelConfig, params: DenseParams | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else DenseParams.init(cfg, seed)

    # ---- key collection
    def node_keys(self, egos: EgoBatch) -> np.ndarray:
        return egos.all_keys()

    def prepare(self, g: HetGraph | None, egos: EgoBatch):
        """Unique nodes of the batch and the sparse keys to pull for them."""
        K = self.cfg.layers
        parts = [egos.centers]
        for r in self.cfg.relations:
            parts.extend(egos.layers[r][j].keys for j in range(K))
        uniq, inverse = np.unique(np.concatenate(parts), return_inverse=True)
        sparse_keys, A = feature_matrix(g, uniq, self.cfg.use_side_info)
        return uniq, inverse, sparse_keys, A

    # ---- forward
    def forward_batch(self, g: HetGraph | None, egos: EgoBatch, lookup, dtype=np.float64):
        """Center representations for every ego in ``egos``.

        ``lookup(sparse_keys) -> (n, d) array`` provides pulled vectors.
        Returns ``(out, tape)``; pass the tape to :meth:`backward`.
        """
        cfg = self.cfg
        K = cfg.layers
        if egos.depth < K:
            raise ValueError(f"ego depth {egos.depth} < model layers {K}")
        uniq, inverse, sparse_keys, A = self.prepare(g, egos)
        X = np.asarray(lookup(sparse_keys), dtype=dtype)
        h0 = np.asarray(A @ X, dtype=dtype)
        node_index = {}
        pos = 0
        n_c = len(egos.centers)
        node_index[("c",)] = inverse[pos:pos + n_c]
        pos += n_c
        for r in cfg.relations:
            for j in range(1, K + 1):
                n = len(egos.layers[r][j - 1].keys)
                node_index[(r, j)] = inverse[pos:pos + n]
                pos += n
        tape = _Tape(egos, K, sparse_keys, A, node_index, len(uniq), h0, dtype=dtype)
        out = self._forward(tape)
        return out, tape

    def _layer_sizes(self, egos, r):
        return [len(egos.centers)] + [len(egos.layers[r][j].keys) for j in range(self.K)]

    @property
    def K(self):
        return self.cfg.layers

    def _gnn(self, r, k, self_rep, child_rep, P):
        """Returns (h_rel, cache) for one relation step."""
        model = self.cfg.model
        if model is ModelKind.LIGHTGCN:
            return P @ child_rep, None
        agg = P @ child_rep
        p = self.params.sage(r, k)
        pre = self_rep @ p["W_self"].T + agg @ p["W_neigh"].T + p["bias"]
        return relu(pre), (agg, pre)

    def _forward(self, t: _Tape) -> np.ndarray:
        cfg = self.cfg
        K, a = t.K, cfg.alpha
        egos = t.egos
        mean = cfg.model in (ModelKind.LIGHTGCN, ModelKind.SAGE_MEAN)
        t.reps[("c", 0)] = t.h0[t.node_index[("c",)]]
        for r in cfg.relations:
            sizes = self._layer_sizes(egos, r)
            for j in range(K):
                t.P[(r, j)] = _segment_matrix(egos.layers[r][j].parent, sizes[j], mean)
            for j in range(1, K + 1):
                t.reps[(r, j, 0)] = t.h0[t.node_index[(r, j)]]
        for k in range(1, K + 1):
            rel_out = []
            for r in cfg.relations:
                # inner tree nodes at hops 1..K-k
                for j in range(1, K - k + 1):
                    h_rel, cache = self._gnn(r, k, t.reps[(r, j, k - 1)], t.reps[(r, j + 1, k - 1)], t.P[(r, j)])
                    t.cache[(r, j, k)] = cache
                    t.reps[(r, j, k)] = a * t.reps[(r, j, 0)] + (1 - a) * h_rel
                h_rel, cache = self._gnn(r, k, t.reps[("c", k - 1)], t.reps[(r, 1, k - 1)], t.P[(r, 0)])
                t.cache[(r, 0, k)] = cache
                rel_out.append(h_rel)
            H = np.stack(rel_out)  # (R, n, d)
            if cfg.phi_mode is PhiMode.ATTENTION:
                p = self.params.attention(k)
                T = np.tanh(H @ p["W_att"].T)
                logits = T @ p["w_att"]
                logits = logits - logits.max(axis=0, keepdims=True)
                z = np.exp(logits)
                phi = z / z.sum(axis=0, keepdims=True)
                t.cache[("att", k)] = (H, T, phi)
            else:
                phi = np.ones((len(rel_out), H.shape[1]), dtype=H.dtype)
                t.cache[("att", k)] = (H, None, phi)
            mixed = np.einsum("rn,rnd->nd", phi, H)
            t.reps[("c", k)] = a * t.reps[("c", 0)] + (1 - a) * mixed
        return t.reps[("c", K)]

    # ---- backward
    def _gnn_backward(self, r, k, grad_h, self_rep, child_rep, P, cache, g_self, g_child, dense):
        if self.cfg.model is ModelKind.LIGHTGCN:
            g_child += P.T @ grad_h
            return
        agg, pre = cache
        p = self.params.sage(r, k)
        dpre = grad_h * (pre > 0)
        dense[f"sage/{r}/{k}/W_self"] += dpre.T @ self_rep
        dense[f"sage/{r}/{k}/W_neigh"] += dpre.T @ agg
        dense[f"sage/{r}/{k}/bias"] += dpre.sum(axis=0)
        g_self += dpre @ p["W_self"]
        g_child += P.T @ (dpre @ p["W_neigh"])

    def backward(self, grad_out: np.ndarray, t: _Tape):
        """Gradients w.r.t. the pulled sparse vectors (aligned with
        ``t.sparse_keys``, summed over occurrences) and the dense params."""
        cfg = self.cfg
        K, a = t.K, cfg.alpha
        dense = self.params.zeros_like()
        grads = {key: np.zeros_like(v) for key, v in t.reps.items()}
        grads[("c", K)] += grad_out
        for k in range(K, 0, -1):
            gc = grads[("c", k)]
            grads[("c", 0)] += a * gc
            H, T, phi = t.cache[("att", k)]
            g_mixed = (1 - a) * gc
            dH = phi[:, :, None] * g_mixed[None, :, :]
            if cfg.phi_mode is PhiMode.ATTENTION:
                p = self.params.attention(k)
                dphi = np.einsum("nd,rnd->rn", g_mixed, H)
                dlogit = phi * (dphi - (phi * dphi).sum(axis=0, keepdims=True))
                dense[f"att/{k}/w"] += np.einsum("rn,rnd->d", dlogit, T)
                dpre = dlogit[:, :, None] * p["w_att"][None, None, :] * (1 - T * T)
                dense[f"att/{k}/W"] += np.einsum("rni,rnj->ij", dpre, H)
                dH += dpre @ p["W_att"]
            for ri, r in enumerate(cfg.relations):
                self._gnn_backward(r, k, dH[ri], t.reps[("c", k - 1)], t.reps[(r, 1, k - 1)], t.P[(r, 0)],
                                   t.cache[(r, 0, k)], grads[("c", k - 1)], grads[(r, 1, k - 1)], dense)
                for j in range(1, K - k + 1):
                    g = grads[(r, j, k)]
                    grads[(r, j, 0)] += a * g
                    self._gnn_backward(r, k, (1 - a) * g, t.reps[(r, j, k - 1)], t.reps[(r, j + 1, k - 1)],
                                       t.P[(r, j)], t.cache[(r, j, k)], grads[(r, j, k - 1)],
                                       grads[(r, j + 1, k - 1)], dense)
        g_h0 = np.zeros_like(t.h0)
        np.add.at(g_h0, t.node_index[("c",)], grads[("c", 0)])
        for r in cfg.relations:
            for j in range(1, K + 1):
                np.add.at(g_h0, t.node_index[(r, j)], grads[(r, j, 0)])
        g_sparse = np.asarray(t.A.T @ g_h0)
        return g_sparse, dense


# -- single-ego convenience wrappers ------------------------------------------------

def ego_batch_from(egos: Sequence[EgoGraph]) -> EgoBatch:
    """Pack single :class:`EgoGraph` views back into an :class:`EgoBatch`."""
    first = egos[0]
    relations = tuple(first.per_relation)
    layers = {}
    for r in relations:
        out = []
        for k in range(1, first.depth + 1):
            keys, parents, ptr = [], [], [0]
            prev_base = 0
            for e in egos:
                rl: RelationLayers = e.per_relation[r]
                lo, hi = rl.layer_offsets[k], rl.layer_offsets[k + 1]
                plo = rl.layer_offsets[k - 1]
                keys.append(rl.nodes[lo:hi])
                edge_child = rl.edges[:, 1]
                sel = (edge_child >= lo) & (edge_child < hi)
                e_par = np.empty(hi - lo, dtype=np.int64)
                e_par[rl.edges[sel, 1] - lo] = rl.edges[sel, 0] - plo
                parents.append(e_par + prev_base)
                prev_base += rl.layer_offsets[k] - plo
                ptr.append(ptr[-1] + hi - lo)
            out.append(_Layer(np.concatenate(keys).astype(np.int64), np.concatenate(parents),
                              np.asarray(ptr, dtype=np.int64)))
        layers[r] = out
    centers = np.asarray([e.center for e in egos], dtype=np.int64)
    return EgoBatch(centers, relations, tuple(first.fanouts), layers)


def forward(ego: EgoGraph, cfg: ModelConfig, sparse: Mapping[int, np.ndarray],
            params: DenseParams | None = None, g: HetGraph | None = None):
    """Final center vector of one ego plus the retained tape.

    ``sparse`` maps every needed parameter key (node IDs and, with side
    info, slot values) to its vector.
    """
    def lookup(keys):
        return np.stack([np.asarray(sparse[int(k)]) for k in keys])

    if not cfg.is_gnn:
        spec = feature_spec(g, ego.center)
        return base_embedding(spec, sparse, cfg.use_side_info), None
    model = RelationalGNN(cfg, params)
    batch = ego_batch_from([ego])
    out, tape = model.forward_batch(g, batch, lookup, dtype=np.result_type(*[np.asarray(v).dtype for v in sparse.values()]))
    tape.cache["model"] = model
    return out[0], tape


def backward(grad_out: np.ndarray, tape: _Tape) -> tuple[dict[int, np.ndarray], DenseParams]:
    """Sparse gradients keyed by parameter key, plus dense gradients."""
    model: RelationalGNN = tape.cache["model"]
    g_sparse, dense = model.backward(np.atleast_2d(grad_out), tape)
    return {int(k): g_sparse[i] for i, k in enumerate(tape.sparse_keys)}, dense
