"""Brute-force retrieval, ICF/UCF/U2I recommendation and recall@K."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


class Strategy(enum.Enum):
    ICF = "icf"
    UCF = "ucf"
    U2I = "u2i"


@dataclass
class EvalConfig:
    N: int = 20
    K: int = 100
    strategy: Strategy = Strategy.U2I
    exclude_train: bool = True

    def __post_init__(self):
        self.strategy = Strategy(self.strategy.lower() if isinstance(self.strategy, str) else self.strategy)
        if self.N < 1 or self.K < 1:
            raise ValueError("N and K must be >= 1")


def topn_similar(query: np.ndarray, candidates: np.ndarray, N: int,
                 exclude: Iterable[int] = ()) -> np.ndarray:
    """Ids of the ``N`` best candidates by inner product, ties by lower id."""
    scores = np.asarray(candidates) @ np.asarray(query)
    return _top_from_scores(scores, N, exclude)


def _top_from_scores(scores: np.ndarray, N: int, exclude) -> np.ndarray:
    n = len(scores)
    keep = np.ones(n, dtype=bool)
    ex = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    if len(ex):
        keep[ex[(ex >= 0) & (ex < n)]] = False
    ids = np.nonzero(keep)[0]
    if not len(ids):
        return ids
    s = scores[ids]
    if len(ids) > N:
        # cut to everything that could tie with the N-th best before sorting
        kth = np.partition(-s, N - 1)[N - 1]
        cand = -s <= kth
        ids, s = ids[cand], s[cand]
    order = np.lexsort((ids, -s))
    return ids[order[:N]]


def _rank(counts: Mapping[int, int], sims: Mapping[int, float], K: int) -> list[int]:
    return sorted(counts, key=lambda i: (-counts[i], -sims[i], i))[:K]


def recommend(strategy: Strategy | str, user: int, user_emb: np.ndarray, item_emb: np.ndarray,
              history: Mapping[int, Sequence[int]], cfg: EvalConfig) -> list[int]:
    """Top-K item ids for one user.

    ``history`` maps user index to train item indices. ICF ranks the items
    retrieved by each history item; UCF ranks items of the top-N similar
    users; both rank by appearance count, then summed similarity, then id.
    U2I retrieves items by the user vector.
    """
    strategy = Strategy(strategy.lower() if isinstance(strategy, str) else strategy)
    seen = list(dict.fromkeys(history.get(user, ())))
    excluded = set(seen) if cfg.exclude_train else set()
    if strategy is Strategy.U2I:
        return topn_similar(user_emb[user], item_emb, cfg.K, sorted(excluded)).tolist()
    if not seen:
        return []
    counts: dict[int, int] = defaultdict(int)
    sims: dict[int, float] = defaultdict(float)
    if strategy is Strategy.ICF:
        for i in seen:
            scores = item_emb @ item_emb[i]
            for j in _top_from_scores(scores, cfg.N, sorted(excluded | {i})).tolist():
                counts[j] += 1
                sims[j] += float(scores[j])
    else:
        scores = user_emb @ user_emb[user]
        for v in _top_from_scores(scores, cfg.N, [user]).tolist():
            for j in dict.fromkeys(history.get(v, ())):
                if j in excluded:
                    continue
                counts[j] += 1
                sims[j] += float(scores[v])
    return _rank(counts, sims, cfg.K)


def recall_at_k(recommendations: Mapping[int, Sequence[int]], truth: Mapping[int, set]) -> float:
    """Mean over users with non-empty truth of ``|top-K & truth| / |truth|``."""
    per_user = per_user_recall(recommendations, truth)
    return float(np.mean(list(per_user.values()))) if per_user else 0.0


def per_user_recall(recommendations, truth) -> dict[int, float]:
    out = {}
    for user, items in truth.items():
        items = set(items)
        if not items:
            continue
        rec = set(recommendations.get(user, ()))
        out[user] = len(rec & items) / len(items)
    return out


def evaluate(user_emb: np.ndarray, item_emb: np.ndarray, history: Mapping[int, Sequence[int]],
             truth: Mapping[int, set], cfg: EvalConfig) -> tuple[float, dict[int, list[int]]]:
    """Recall@K of ``cfg.strategy`` over users that have ground truth."""
    user_emb = np.asarray(user_emb, dtype=np.float64)
    item_emb = np.asarray(item_emb, dtype=np.float64)
    recs = {}
    if cfg.strategy is Strategy.U2I:
        # batched scoring for the common case
        users = [u for u, t in truth.items() if t]
        S = user_emb[users] @ item_emb.T
        for row, u in enumerate(users):
            excluded = sorted(set(history.get(u, ()))) if cfg.exclude_train else []
            recs[u] = _top_from_scores(S[row], cfg.K, excluded).tolist()
    else:
        for u, t in truth.items():
            if t:
                recs[u] = recommend(cfg.strategy, u, user_emb, item_emb, history, cfg)
    return recall_at_k(recs, truth), recs


def write_report(rows: Iterable[tuple[str, int, float]], fh) -> None:
    for strategy, K, recall in rows:
        fh.write(f"{strategy}\t{K}\t{recall:.6f}\n")
