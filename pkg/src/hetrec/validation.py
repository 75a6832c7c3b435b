"""Input checks shared by the estimator API."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .graph import GraphError, HetGraph


def check_edges(X) -> list[tuple]:
    """Coerce ``X`` to ``(edge_type, src_id, dst_id[, timestamp])`` tuples of strings.

    Accepts a list of tuples, a 2-D array, or a DataFrame-like object with a
    ``to_numpy`` method.
    """
    if hasattr(X, "to_numpy"):
        X = X.to_numpy()
    rows = X.tolist() if isinstance(X, np.ndarray) else list(X)
    if not rows:
        raise ValueError("no edges given")
    out = []
    for n, row in enumerate(rows):
        if isinstance(row, (str, bytes)) or len(row) not in (3, 4):
            raise ValueError(f"edge row {n} must have 3 or 4 fields, got {row!r}")
        etype, src, dst = (str(v) for v in row[:3])
        out.append((etype, src, dst) if len(row) == 3 else (etype, src, dst, int(row[3])))
    return out


def check_nodes(X, g: HetGraph, default_type: str) -> tuple[str, np.ndarray]:
    """Resolve node ids to ``(node_type, dense indices)``.

    ``X`` is either a 1-D sequence of ids of ``default_type`` or a sequence of
    ``(node_type, node_id)`` pairs sharing one type.
    """
    if hasattr(X, "to_numpy"):
        X = X.to_numpy()
    items = X.tolist() if isinstance(X, np.ndarray) else list(X)
    if not items:
        return default_type, np.zeros(0, dtype=np.int64)
    if all(isinstance(x, (tuple, list)) for x in items):
        types = {str(t) for t, _ in items}
        if len(types) != 1:
            raise ValueError(f"nodes must share one type, got {sorted(types)}")
        node_type = types.pop()
        ids = [str(i) for _, i in items]
    else:
        node_type, ids = default_type, [str(i) for i in items]
    if node_type not in g.node_types:
        raise GraphError(f"unknown node type {node_type!r}")
    return node_type, np.asarray([g.index(node_type, i) for i in ids], dtype=np.int64)


def check_positive_ints(name: str, values: Sequence[int]) -> tuple[int, ...]:
    values = tuple(int(v) for v in values)
    if not values or min(values) < 1:
        raise ValueError(f"{name} must be a non-empty sequence of positive integers")
    return values
