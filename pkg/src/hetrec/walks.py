"""Multi-metapath random walks."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .graph import EdgeTypeTriple, GraphError, HetGraph, _register_schema, parse_edge_type
from .rng import MASK64, combine_array, hash_combine

METAPATH_SEPARATOR = "-"


@dataclass(frozen=True)
class MetaPath:
    steps: tuple[EdgeTypeTriple, ...]

    @property
    def name(self) -> str:
        return " - ".join(s.name for s in self.steps)

    @property
    def start_type(self) -> str:
        return self.steps[0].src_type

    def node_type_at(self, position: int) -> str:
        if position == 0:
            return self.steps[0].src_type
        return self.steps[(position - 1) % len(self.steps)].dst_type

    def __len__(self):
        return len(self.steps)


def parse_metapath(spec: str, schema: HetGraph | Sequence[EdgeTypeTriple | str]) -> MetaPath:
    """Parse ``"u2click2i - i2click2u"`` against the registered edge types."""
    if isinstance(schema, HetGraph):
        known = {t.name: t for t in schema.relations}
    else:
        known = _register_schema(schema)
    parts = [p.strip() for p in spec.split(METAPATH_SEPARATOR)]
    if not parts or any(not p for p in parts):
        raise GraphError(f"malformed metapath {spec!r}")
    steps = []
    for part in parts:
        parse_edge_type(part)
        triple = known.get(part)
        if triple is None:
            raise GraphError(f"metapath {spec!r}: unknown relation {part!r}")
        steps.append(triple)
    for a, b in zip(steps, steps[1:]):
        if a.dst_type != b.src_type:
            raise GraphError(
                f"metapath {spec!r}: {a.name!r} ends at {a.dst_type!r} "
                f"but {b.name!r} starts at {b.src_type!r}")
    if steps[-1].dst_type != steps[0].src_type:
        raise GraphError(
            f"metapath {spec!r} is not cyclic: ends at {steps[-1].dst_type!r}, "
            f"starts at {steps[0].src_type!r}")
    return MetaPath(tuple(steps))


@dataclass
class WalkConfig:
    metapaths: list[MetaPath]
    walk_len: int = 24
    walks_per_node: int = 1
    seed: int = 0
    workers: int = 1
    chunk_size: int = 4096

    def __post_init__(self):
        if self.walk_len < 1:
            raise ValueError("walk_len must be >= 1")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        if not self.metapaths:
            raise ValueError("at least one metapath is required")


@dataclass
class Path:
    nodes: np.ndarray
    metapath_id: int
    keys: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.nodes)


def _walk_chunk(g: HetGraph, mp: MetaPath, mp_id: int, starts: np.ndarray, rep: int,
                walk_len: int, seed: int) -> list[Path]:
    n = len(starts)
    out = np.zeros((n, walk_len), dtype=np.int64)
    lengths = np.ones(n, dtype=np.int64)
    out[:, 0] = starts
    start_keys = g.keys(mp.start_type)[starts] if n else starts
    base = combine_array(hash_combine(seed, mp_id, rep), start_keys)
    alive = np.arange(n)
    cur = starts.copy()
    for t in range(walk_len - 1):
        if not len(alive):
            break
        offsets, targets = g.csr(mp.steps[t % len(mp.steps)].name)
        deg = offsets[cur + 1] - offsets[cur]
        moving = deg > 0
        alive, cur, deg = alive[moving], cur[moving], deg[moving]
        if not len(alive):
            break
        u = combine_array(base[alive], t)
        pick = (u % deg.astype(np.uint64)).astype(np.int64)
        cur = targets[offsets[cur] + pick]
        out[alive, t + 1] = cur
        lengths[alive] = t + 2
    ordinals = [g.type_ordinal(mp.node_type_at(p)) for p in range(walk_len)]
    shift = np.asarray(ordinals, dtype=np.int64) << 48
    keys = out + shift
    return [Path(out[i, :lengths[i]], mp_id, keys[i, :lengths[i]]) for i in range(n)]


def generate_walks(g: HetGraph, cfg: WalkConfig, epoch: int = 0) -> Iterator[Path]:
    """Yield ``walks_per_node`` walks from every start node of every metapath.

    Step ``t`` picks uniformly among the neighbors under
    ``steps[t % len(steps)]``; a walk stops early at a dead end. Randomness is
    a pure function of ``(seed, metapath, start node, repetition, step)``, so
    the multiset of paths does not depend on ``workers`` or chunking. Start
    order is shuffled per ``epoch``.
    """
    seed = int(cfg.seed) & MASK64
    jobs = []
    for mp_id, mp in enumerate(cfg.metapaths):
        n = g.num_nodes(mp.start_type)
        if n == 0:
            raise GraphError(f"metapath {mp.name!r}: no nodes of type {mp.start_type!r}")
        for rep in range(cfg.walks_per_node):
            order_rng = np.random.default_rng(hash_combine(seed, epoch, mp_id, rep))
            order = order_rng.permutation(n).astype(np.int64)
            for lo in range(0, n, cfg.chunk_size):
                jobs.append((mp, mp_id, order[lo:lo + cfg.chunk_size], rep))

    def run(job):
        mp, mp_id, starts, rep = job
        return _walk_chunk(g, mp, mp_id, starts, rep, cfg.walk_len, seed)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            for chunk in pool.map(run, jobs):
                yield from chunk
    else:
        for job in jobs:
            yield from run(job)


def write_walks(paths, g: HetGraph, metapaths: Sequence[MetaPath], fh) -> int:
    """Debug dump: ``metapath name<TAB>id id id`` per line."""
    count = 0
    for path in paths:
        ids = " ".join(g.describe_key(k).split(":", 1)[1] for k in path.keys)
        fh.write(f"{metapaths[path.metapath_id].name}\t{ids}\n")
        count += 1
    return count
