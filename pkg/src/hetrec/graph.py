"""Heterogeneous graph storage, edge-type parsing and interaction splitting."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DELIMITER = "2"
TYPE_SHIFT = 48
INDEX_MASK = (1 << TYPE_SHIFT) - 1
MAX_NODE_TYPES = 1 << 12

_WHITESPACE = re.compile(r"\s")


class GraphError(ValueError):
    """Raised for malformed schemas, edge specs or edge lists."""


@dataclass(frozen=True)
class EdgeTypeTriple:
    """A typed relation ``src_type -relation-> dst_type``.

    ``name`` is the edge-type spec the triple is addressed by
    (``"u2click2i"``). Two-part specs such as ``"u2u"`` use the whole
    spec as the relation name.
    """

    src_type: str
    relation: str
    dst_type: str
    symmetric: bool = False
    name: str = ""

    def __post_init__(self):
        if not self.name:
            object.__setattr__(self, "name", _join_name(self.src_type, self.relation, self.dst_type))

    def reverse(self) -> "EdgeTypeTriple":
        if self.src_type == self.dst_type and self.name == self.relation:
            name = self.name
        elif self.name == self.relation:
            # two-part heterogeneous spec ("u2i"), reverse is addressed as "i2u"
            name = f"{self.dst_type}{DELIMITER}{self.src_type}"
        else:
            name = _join_name(self.dst_type, self.relation, self.src_type)
        return EdgeTypeTriple(self.dst_type, self.relation, self.src_type, self.symmetric, name)


def _join_name(src: str, rel: str, dst: str) -> str:
    if rel == f"{src}{DELIMITER}{dst}":
        return rel
    return DELIMITER.join((src, rel, dst))


def parse_edge_type(spec: str, symmetric: bool = False) -> EdgeTypeTriple:
    """Split an edge-type spec on ``"2"``.

    >>> parse_edge_type("u2click2i")
    EdgeTypeTriple(src_type='u', relation='click', dst_type='i', symmetric=False, name='u2click2i')
    """
    if not isinstance(spec, str) or not spec:
        raise GraphError(f"edge type spec must be a non-empty string, got {spec!r}")
    if _WHITESPACE.search(spec):
        raise GraphError(f"edge type spec {spec!r} contains whitespace")
    parts = spec.split(DELIMITER)
    if len(parts) not in (2, 3):
        raise GraphError(f"edge type spec {spec!r} has {len(parts)} parts, expected 2 or 3")
    if any(not p for p in parts):
        raise GraphError(f"edge type spec {spec!r} has an empty part")
    if len(parts) == 2:
        src, dst = parts
        return EdgeTypeTriple(src, spec, dst, symmetric, spec)
    src, rel, dst = parts
    return EdgeTypeTriple(src, rel, dst, symmetric, spec)


def node_key(type_ordinal: int, index: int) -> int:
    """Global parameter key of a node: type ordinal in the high bits."""
    return (type_ordinal << TYPE_SHIFT) | index


def split_key(key: int) -> tuple[int, int]:
    return key >> TYPE_SHIFT, key & INDEX_MASK


class Interaction(NamedTuple):
    user: str
    item: str
    behavior: str
    timestamp: int


@dataclass
class InteractionLog:
    records: list[Interaction] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_user(self) -> dict[str, list[Interaction]]:
        out: dict[str, list[Interaction]] = defaultdict(list)
        for rec in self.records:
            out[rec.user].append(rec)
        return out


class _Adjacency(NamedTuple):
    offsets: np.ndarray
    targets: np.ndarray


class HetGraph:
    """Immutable relation-indexed adjacency over typed nodes.

    Build with :func:`build_graph`. Node indices are dense per node type in
    first-seen order; :meth:`key` maps ``(type, index)`` to the global key used
    by the parameter server.
    """

    def __init__(self, node_types, vocab, relations, adjacency, side_info, slot_vocab):
        self._node_types: tuple[str, ...] = tuple(node_types)
        self._type_ordinal = {t: i for i, t in enumerate(self._node_types)}
        self._vocab: dict[str, dict[str, int]] = vocab
        self._ids: dict[str, tuple[str, ...]] = {t: tuple(v) for t, v in vocab.items()}
        self._relations: dict[str, EdgeTypeTriple] = relations
        self._adj: dict[str, _Adjacency] = adjacency
        self._side_info: dict[int, tuple[tuple[int, tuple[int, ...]], ...]] = side_info
        self._slot_vocab: dict[int, dict[str, int]] = slot_vocab
        for adj in self._adj.values():
            adj.offsets.setflags(write=False)
            adj.targets.setflags(write=False)
        self._groups = self._build_groups()

    # -- schema --------------------------------------------------------------
    @property
    def node_types(self) -> tuple[str, ...]:
        return self._node_types

    @property
    def relations(self) -> list[EdgeTypeTriple]:
        return list(self._relations.values())

    @property
    def relation_names(self) -> list[str]:
        """Distinct relation names, in registration order."""
        seen = dict.fromkeys(t.relation for t in self._relations.values())
        return list(seen)

    def edge_type(self, name: str) -> EdgeTypeTriple:
        try:
            return self._relations[name]
        except KeyError:
            raise GraphError(f"unknown relation {name!r}") from None

    def type_ordinal(self, node_type: str) -> int:
        try:
            return self._type_ordinal[node_type]
        except KeyError:
            raise GraphError(f"unknown node type {node_type!r}") from None

    # -- vocabulary ----------------------------------------------------------
    def num_nodes(self, node_type: str | None = None) -> int:
        if node_type is None:
            return sum(len(v) for v in self._ids.values())
        return len(self._ids.get(node_type, ()))

    def index(self, node_type: str, node_id: str) -> int:
        try:
            return self._vocab[node_type][node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_type}:{node_id}") from None

    def node_id(self, node_type: str, index: int) -> str:
        return self._ids[node_type][index]

    def node_ids(self, node_type: str) -> tuple[str, ...]:
        return self._ids.get(node_type, ())

    def key(self, node_type: str, index: int) -> int:
        return node_key(self.type_ordinal(node_type), index)

    def keys(self, node_type: str) -> np.ndarray:
        n = self.num_nodes(node_type)
        return (np.int64(self.type_ordinal(node_type)) << TYPE_SHIFT) + np.arange(n, dtype=np.int64)

    def key_type(self, key: int) -> str:
        return self._node_types[int(key) >> TYPE_SHIFT]

    def describe_key(self, key: int) -> str:
        t, i = split_key(int(key))
        node_type = self._node_types[t]
        return f"{node_type}:{self._ids[node_type][i]}"

    # -- adjacency -----------------------------------------------------------
    def neighbors(self, v: int, r: str) -> np.ndarray:
        """Read-only neighbor indices of ``v`` under edge type ``r``."""
        adj = self._adj.get(r)
        if adj is None:
            raise GraphError(f"unknown relation {r!r}")
        if v < 0 or v >= len(adj.offsets) - 1:
            return adj.targets[:0]
        return adj.targets[adj.offsets[v]:adj.offsets[v + 1]]

    def degree(self, v: int, r: str) -> int:
        return len(self.neighbors(v, r))

    def csr(self, r: str) -> tuple[np.ndarray, np.ndarray]:
        adj = self._adj.get(r)
        if adj is None:
            raise GraphError(f"unknown relation {r!r}")
        return adj.offsets, adj.targets

    def num_edges(self, r: str | None = None) -> int:
        if r is None:
            return sum(len(a.targets) for a in self._adj.values())
        return len(self.csr(r)[1])

    def _build_groups(self):
        # relation name -> src type ordinal -> (offsets, neighbor keys)
        groups: dict[str, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
        per_src: dict[tuple[str, str], list[EdgeTypeTriple]] = defaultdict(list)
        for t in self._relations.values():
            per_src[(t.relation, t.src_type)].append(t)
        for (rel, src_type), triples in per_src.items():
            n = self.num_nodes(src_type)
            src_parts, key_parts = [], []
            for t in triples:
                offsets, targets = self._adj[t.name]
                deg = np.diff(offsets)
                src_parts.append(np.repeat(np.arange(n, dtype=np.int64), deg))
                key_parts.append(targets + (np.int64(self._type_ordinal[t.dst_type]) << TYPE_SHIFT))
            src = np.concatenate(src_parts) if src_parts else np.zeros(0, np.int64)
            keys = np.concatenate(key_parts) if key_parts else np.zeros(0, np.int64)
            order = np.argsort(src, kind="stable")
            offsets = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
            keys = keys[order]
            offsets.setflags(write=False)
            keys.setflags(write=False)
            groups.setdefault(rel, {})[self._type_ordinal[src_type]] = (offsets, keys)
        return groups

    def relation_csr(self, relation: str, type_ordinal: int):
        """Adjacency of relation name ``relation`` for nodes of one type.

        Neighbors are global keys and cover every edge type that shares the
        relation name and source type (so a symmetric relation covers both
        directions). Returns ``None`` when the relation does not apply.
        """
        return self._groups.get(relation, {}).get(type_ordinal)

    def key_neighbors(self, key: int, relation: str) -> np.ndarray:
        t, i = split_key(int(key))
        csr = self.relation_csr(relation, t)
        if csr is None:
            return np.zeros(0, np.int64)
        offsets, keys = csr
        return keys[offsets[i]:offsets[i + 1]]

    # -- side info -----------------------------------------------------------
    @property
    def has_side_info(self) -> bool:
        return bool(self._side_info)

    def side_info(self, key: int) -> tuple[tuple[int, tuple[int, ...]], ...]:
        """Slot features of a node as ``((slot, (value index, ...)), ...)``."""
        return self._side_info.get(int(key), ())

    def slot_value_index(self, slot: int, value: str) -> int:
        return self._slot_vocab[slot][value]

    def degree_stats(self) -> dict[str, tuple[int, float, int]]:
        out = {}
        for name, adj in self._adj.items():
            deg = np.diff(adj.offsets)
            if len(deg):
                out[name] = (int(deg.min()), float(deg.mean()), int(deg.max()))
            else:
                out[name] = (0, 0.0, 0)
        return out

    def __repr__(self):
        return (f"HetGraph(node_types={list(self._node_types)}, "
                f"nodes={self.num_nodes()}, edges={self.num_edges()})")


def _register_schema(schema: Iterable[EdgeTypeTriple | str]) -> dict[str, EdgeTypeTriple]:
    relations: dict[str, EdgeTypeTriple] = {}
    for triple in schema:
        if isinstance(triple, str):
            triple = parse_edge_type(triple, symmetric=True)
        for part in (triple.src_type, triple.dst_type):
            if not part or DELIMITER in part or _WHITESPACE.search(part):
                raise GraphError(f"invalid node type name {part!r} in {triple.name!r}")
        if triple.name != triple.relation and (
                DELIMITER in triple.relation or _WHITESPACE.search(triple.relation) or not triple.relation):
            raise GraphError(f"invalid relation name {triple.relation!r} in {triple.name!r}")
        _add_relation(relations, triple)
        if triple.symmetric:
            _add_relation(relations, triple.reverse())
    return relations


def _add_relation(relations, triple):
    known = relations.get(triple.name)
    if known is None:
        relations[triple.name] = triple
    elif (known.src_type, known.relation, known.dst_type) != (triple.src_type, triple.relation, triple.dst_type):
        raise GraphError(f"edge type {triple.name!r} registered twice with different endpoints")
    elif triple.symmetric and not known.symmetric:
        relations[triple.name] = triple


def build_graph(
    schema: Sequence[EdgeTypeTriple | str],
    edges: Iterable[Sequence[str]],
    side_info: Iterable[tuple[str, str, dict[int, Sequence[str]]]] | None = None,
) -> HetGraph:
    """Build an immutable :class:`HetGraph`.

    ``edges`` holds ``(edge_type, src_id, dst_id)`` triples (extra trailing
    fields such as timestamps are ignored). Schema strings are parsed as
    symmetric edge types. Duplicate edges are kept.
    """
    relations = _register_schema(schema)
    node_types: list[str] = []
    for t in relations.values():
        for nt in (t.src_type, t.dst_type):
            if nt not in node_types:
                node_types.append(nt)
    if len(node_types) > MAX_NODE_TYPES:
        raise GraphError(f"too many node types ({len(node_types)})")
    vocab: dict[str, dict[str, int]] = {t: {} for t in node_types}
    pairs: dict[str, tuple[list[int], list[int]]] = {name: ([], []) for name in relations}

    def intern(node_type, node_id):
        if not isinstance(node_id, str) or not node_id:
            raise GraphError(f"invalid {node_type} node id {node_id!r}")
        table = vocab[node_type]
        idx = table.get(node_id)
        if idx is None:
            idx = table[node_id] = len(table)
        return idx

    for edge in edges:
        spec, src_id, dst_id = edge[0], edge[1], edge[2]
        triple = relations.get(spec)
        if triple is None:
            raise GraphError(f"unknown edge type {spec!r}")
        s = intern(triple.src_type, src_id)
        d = intern(triple.dst_type, dst_id)
        srcs, dsts = pairs[spec]
        srcs.append(s)
        dsts.append(d)
        if triple.symmetric:
            rev = triple.reverse()
            rsrcs, rdsts = pairs[rev.name]
            rsrcs.append(d)
            rdsts.append(s)

    adjacency = {}
    for name, triple in relations.items():
        srcs, dsts = pairs[name]
        n_src = len(vocab[triple.src_type])
        src = np.asarray(srcs, dtype=np.int64)
        dst = np.asarray(dsts, dtype=np.int64)
        order = np.argsort(src, kind="stable")
        offsets = np.zeros(n_src + 1, dtype=np.int64)
        if len(src):
            np.cumsum(np.bincount(src, minlength=n_src), out=offsets[1:])
        adjacency[name] = _Adjacency(offsets, dst[order])

    slot_vocab: dict[int, dict[str, int]] = {}
    features: dict[int, tuple] = {}
    type_ordinal = {t: i for i, t in enumerate(node_types)}
    for node_type, node_id, slots in side_info or ():
        if node_type not in vocab:
            raise GraphError(f"side info for unknown node type {node_type!r}")
        idx = intern(node_type, node_id)
        entries = []
        for slot, values in sorted(slots.items()):
            slot = int(slot)
            if not 0 <= slot < (1 << 30):
                raise GraphError(f"slot id {slot} out of range")
            table = slot_vocab.setdefault(slot, {})
            ids = []
            for value in values:
                vid = table.get(value)
                if vid is None:
                    vid = table[value] = len(table)
                ids.append(vid)
            if ids:
                entries.append((slot, tuple(ids)))
        features[node_key(type_ordinal[node_type], idx)] = tuple(entries)

    # nodes first seen in side info have no edges; pad offsets to cover them
    for name, triple in relations.items():
        adj = adjacency[name]
        n_src = len(vocab[triple.src_type])
        if len(adj.offsets) < n_src + 1:
            pad = np.full(n_src + 1 - len(adj.offsets), adj.offsets[-1], dtype=np.int64)
            adjacency[name] = _Adjacency(np.concatenate([adj.offsets, pad]), adj.targets)

    return HetGraph(node_types, vocab, relations, adjacency, features, slot_vocab)


def temporal_split(log: InteractionLog, train_frac: float = 0.8, val_frac: float = 0.1):
    """Split each user's time-ordered history into train/val/test logs.

    Per user with ``n`` records: the first ``floor(n*train_frac)`` go to train,
    up to ``floor(n*(train_frac+val_frac))`` to val, the rest to test. Ties in
    timestamp keep input order.
    """
    tf = Fraction(train_frac).limit_denominator(10**9)
    vf = Fraction(val_frac).limit_denominator(10**9)
    if tf <= 0 or vf <= 0 or tf + vf >= 1:
        raise ValueError("need train_frac > 0, val_frac > 0 and train_frac + val_frac < 1")
    train, val, test = InteractionLog(), InteractionLog(), InteractionLog()
    for records in log.by_user().values():
        records = sorted(records, key=lambda r: r.timestamp)
        n = len(records)
        a = int(n * tf)
        b = int(n * (tf + vf))
        train.records.extend(records[:a])
        val.records.extend(records[a:b])
        test.records.extend(records[b:])
    return train, val, test


# -- TSV readers ---------------------------------------------------------------

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def read_edges(path) -> list[tuple]:
    """Read ``edge_type, src_id, dst_id[, timestamp]`` rows."""
    edges = []
    for lineno, cols in _data_lines(path):
        if len(cols) not in (3, 4):
            raise GraphError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(cols)}")
        if len(cols) == 4:
            edges.append((cols[0], cols[1], cols[2], int(cols[3])))
        else:
            edges.append((cols[0], cols[1], cols[2]))
    return edges


def read_side_info(path) -> list[tuple[str, str, dict[int, list[str]]]]:
    """Read ``node_type, node_id, slot:v1,v2 ...`` rows."""
    out = []
    for lineno, cols in _data_lines(path):
        if len(cols) < 2:
            raise GraphError(f"{path}:{lineno}: expected node_type and node_id")
        slots: dict[int, list[str]] = {}
        for field_ in cols[2:]:
            slot, sep, values = field_.partition(":")
            if not sep or not slot.isdigit():
                raise GraphError(f"{path}:{lineno}: bad slot field {field_!r}")
            slots.setdefault(int(slot), []).extend(v for v in values.split(",") if v)
        out.append((cols[0], cols[1], slots))
    return out


def read_interactions(path) -> InteractionLog:
    log = InteractionLog()
    for lineno, cols in _data_lines(path):
        if len(cols) != 4:
            raise GraphError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
        log.records.append(Interaction(cols[0], cols[1], cols[2], int(cols[3])))
    return log


def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(f"{r.user}\t{r.item}\t{r.behavior}\t{r.timestamp}\n")
