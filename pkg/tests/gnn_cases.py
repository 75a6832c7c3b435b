"""Random small GNN problems with a finite-difference gradient oracle."""

import numpy as np

from hetrec.graph import build_graph
from hetrec.models import DenseParams, ModelConfig, RelationalGNN
from hetrec.sampling import sample_egos
from hetrec.trainer import _batched_explicit, loss_inbatch, sample_inbatch_negatives

KINK = 1e-3


def random_case(rng, model, phi, max_nodes=20, max_dim=8):
    relations = ("click", "buy")[:rng.integers(1, 3)]
    n_u = int(rng.integers(2, max_nodes // 2 + 1))
    n_i = int(rng.integers(2, max_nodes - n_u + 1))
    edges = [(f"u2{relations[rng.integers(len(relations))]}2i", f"u{rng.integers(n_u)}", f"i{rng.integers(n_i)}")
             for _ in range(int(rng.integers(3, 3 * (n_u + n_i))))]
    side = None
    if rng.random() < 0.5:
        side = [("u", f"u{rng.integers(n_u)}", {1: [f"a{rng.integers(3)}", f"a{rng.integers(3)}"]}),
                ("i", f"i{rng.integers(n_i)}", {2: [f"b{rng.integers(2)}"], 3: ["c"]})]
    g = build_graph([f"u2{r}2i" for r in relations], edges, side)
    K = int(rng.integers(1, 3))
    d = int(rng.integers(2, max_dim + 1))
    alpha = float(rng.choice([0.0, rng.random(), 1.0], p=[0.3, 0.6, 0.1]))
    cfg = ModelConfig(model, layers=K, dim=d, alpha=alpha, phi_mode=phi, relations=g.relation_names,
                      use_side_info=side is not None)
    params = DenseParams.init(cfg, int(rng.integers(1 << 30)))
    for name in params:
        params[name] = params[name] + rng.normal(0, 0.3, params[name].shape)
    fanouts = tuple(int(f) for f in rng.integers(1, 4, K))
    return g, cfg, params, fanouts


def _preacts(tape):
    return [c[1] for k, c in tape.cache.items() if isinstance(k, tuple) and len(k) == 3 and c is not None]


class Problem:
    """Scalar loss over a batch of egos as a function of (sparse X, dense params)."""

    def __init__(self, rng, g, cfg, params, fanouts, loss="explicit", B=3, M=2):
        self.g, self.cfg = g, cfg
        self.model = RelationalGNN(cfg, params)
        all_keys = np.concatenate([g.keys(t) for t in g.node_types])
        n_egos = B * (2 + M) if loss == "explicit" else 2 * B
        centers = rng.choice(all_keys, n_egos)
        self.egos = sample_egos(g, centers, cfg.relations, fanouts, rng)
        _, _, self.sparse_keys, _ = self.model.prepare(g, self.egos)
        self.X = rng.normal(0, 0.7, (len(self.sparse_keys), cfg.dim))
        self.loss, self.B, self.M = loss, B, M
        self.neg_index = sample_inbatch_negatives(B, M, rng) if loss == "in_batch" else None

    def forward(self, X=None):
        X = self.X if X is None else X
        out, tape = self.model.forward_batch(self.g, self.egos, lambda k: X[np.searchsorted(self.sparse_keys, k)])
        B, M = self.B, self.M
        H_v, H_u = out[:B], out[B:2 * B]
        if self.loss == "explicit":
            N = out[2 * B:].reshape(B, M, -1)
            loss, g_v, g_u, g_n = _batched_explicit(H_v, H_u, N)
            g_out = np.concatenate([g_v, g_u, g_n.reshape(B * M, -1)])
        else:
            loss, g_v, g_u, _ = loss_inbatch(H_v, H_u, M, neg_index=self.neg_index)
            g_out = np.concatenate([g_v, g_u])
        return loss, g_out, tape

    def gradient(self):
        _, g_out, tape = self.forward()
        g_sparse, dense = self.model.backward(g_out, tape)
        order = np.argsort(tape.sparse_keys)
        # backward aligns with the tape's key order; map onto self.sparse_keys
        g_x = np.zeros_like(self.X)
        g_x[np.searchsorted(self.sparse_keys, tape.sparse_keys[order])] = g_sparse[order]
        return g_x, dense

    def near_kink(self):
        _, _, tape = self.forward()
        return any(np.any(np.abs(p) < KINK) for p in _preacts(tape))

    def _masks(self):
        _, _, tape = self.forward()
        return [p > 0 for p in _preacts(tape)]

    def directional_check(self, rng, eps=1e-4, n_dirs=3):
        """Largest relative error of analytic vs central-difference directional
        derivatives over ``n_dirs`` random unit directions in (X, dense)."""
        g_x, dense = self.gradient()
        names = sorted(self.model.params)
        worst = 0.0
        ref_masks = self._masks()
        for _ in range(n_dirs):
            dX = rng.normal(size=self.X.shape)
            dP = {n: rng.normal(size=self.model.params[n].shape) for n in names}
            norm = np.sqrt((dX ** 2).sum() + sum((v ** 2).sum() for v in dP.values()))
            dX /= norm
            for n in names:
                dP[n] /= norm
            analytic = (g_x * dX).sum() + sum((dense[n] * dP[n]).sum() for n in names)
            vals = []
            for s in (1, -1):
                base = {n: self.model.params[n].copy() for n in names}
                for n in names:
                    self.model.params[n] = base[n] + s * eps * dP[n]
                X = self.X + s * eps * dX
                vals.append(self.forward(X)[0])
                _, tape = self.model.forward_batch(self.g, self.egos,
                                                      lambda k: X[np.searchsorted(self.sparse_keys, k)])
                crossed = any(np.any((p > 0) != m) for p, m in zip(_preacts(tape), ref_masks))
                for n in names:
                    self.model.params[n] = base[n]
                if crossed:
                    return None
            numeric = (vals[0] - vals[1]) / (2 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / scale)
        return worst


def run_suite(model, phi, loss, cases, seed):
    """(passed, worst error, rejected) over ``cases`` accepted random problems."""
    rng = np.random.default_rng(seed)
    worst, passed, rejected = 0.0, 0, 0
    while passed < cases:
        g, cfg, params, fanouts = random_case(rng, model, phi)
        prob = Problem(rng, g, cfg, params, fanouts, loss)
        if prob.near_kink():
            rejected += 1
            continue
        err = prob.directional_check(rng)
        if err is None:
            rejected += 1
            continue
        worst = max(worst, err)
        passed += err < 1e-5
        if err >= 1e-5:
            return passed, worst, rejected
    return passed, worst, rejected
