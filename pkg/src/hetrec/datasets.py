"""Synthetic interaction graphs with planted structure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class BlockBipartite:
    train_edges: list[tuple[str, str, str]]
    heldout: dict[str, set[str]]
    user_block: dict[str, int]
    item_block: dict[str, int]


def block_bipartite(n_blocks: int = 4, users_per_block: int = 100, items_per_block: int = 100,
                    p_in: float = 0.2, p_out: float = 0.01, heldout_frac: float = 0.1,
                    relation: str = "u2click2i", seed: int = 0) -> BlockBipartite:
    """Bipartite stochastic block model of user-item clicks.

    A ``heldout_frac`` share of the within-block edges is removed from the
    training edges and returned per user as ground truth.
    """
    rng = np.random.default_rng(seed)
    n_users = n_blocks * users_per_block
    n_items = n_blocks * items_per_block
    ub = np.repeat(np.arange(n_blocks), users_per_block)
    ib = np.repeat(np.arange(n_blocks), items_per_block)
    same = ub[:, None] == ib[None, :]
    prob = np.where(same, p_in, p_out)
    adj = rng.random((n_users, n_items)) < prob
    users, items = np.nonzero(adj)
    within = same[users, items]
    hold = within & (rng.random(len(users)) < heldout_frac)
    train = [(relation, f"u{u}", f"i{i}") for u, i in zip(users[~hold], items[~hold])]
    heldout: dict[str, set[str]] = {}
    for u, i in zip(users[hold], items[hold]):
        heldout.setdefault(f"u{u}", set()).add(f"i{i}")
    return BlockBipartite(train, heldout,
                          {f"u{u}": int(ub[u]) for u in range(n_users)},
                          {f"i{i}": int(ib[i]) for i in range(n_items)})
