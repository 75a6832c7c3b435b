from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetrec.graph import build_graph
from hetrec.sampling import (EgoBatch, PairBatch, PipelineMode, PipelineOrder, gen_pairs, sample_ego,
                             sample_egos, stream_training_batches)
from hetrec.walks import WalkConfig, generate_walks, parse_metapath

from conftest import random_bipartite


def brute_pairs(n, w):
    return [(i, j) for i in range(n) for j in range(n) if i != j and abs(i - j) <= w]


def test_gen_pairs_examples():
    assert len(gen_pairs([0, 1, 2, 3], 2)) == 10
    assert gen_pairs([7], 3) == []
    assert gen_pairs(["a", "b"], 1) == [(0, 1), (1, 0)]


@given(st.integers(0, 30), st.integers(1, 6))
def test_gen_pairs_matches_enumeration(n, w):
    got = gen_pairs(list(range(n)), w)
    assert got == brute_pairs(n, w)
    assert set(got) == {(j, i) for i, j in got}


def test_ego_degree_below_fanout():
    g = build_graph(["u2click2i"], [("u2click2i", "u1", "i1")])
    ego = sample_ego(g, g.key("u", 0), ["click"], [2], np.random.default_rng(0))
    assert ego.layers("click")[1].tolist() == [g.key("i", 0)]


def test_ego_no_neighbors_is_center_only(click_graph):
    g = click_graph
    ego = sample_ego(g, g.key("u", g.index("u", "u3")), ["click"], [3, 3], np.random.default_rng(0))
    layers = ego.layers("click")
    assert layers[0].tolist() == [g.key("u", g.index("u", "u3"))]
    assert all(len(l) == 0 for l in layers[1:])


def test_ego_path_graph():
    g = build_graph(["n2r2n"], [("n2r2n", "a", "b"), ("n2r2n", "b", "c")])
    # make b's only onward neighbor c by sampling from a: hop 1 = b, hop 2 in {a, c}
    ego = sample_ego(g, g.key("n", 0), ["r"], [1, 1], np.random.default_rng(1))
    layers = [[g.node_id("n", k & 0xFFFFFFFFFFFF) for k in l.tolist()] for l in ego.layers("r")]
    assert layers[0] == ["a"] and layers[1] == ["b"] and layers[2][0] in {"a", "c"}
    dist = {"a": 0, "b": 1, "c": 2}
    assert all(dist[x] <= k for k, l in enumerate(layers) for x in l)


def test_mismatched_relation_gives_empty_layers(click_graph):
    g = click_graph
    ego = sample_ego(g, g.key("u", 0), ["buy"], [2, 2], np.random.default_rng(0))
    assert len(ego.layers("buy")[1]) == 0


def relation_adjacency(g, relation):
    adj = {}
    for t in g.relations:
        if t.relation != relation:
            continue
        for v in range(g.num_nodes(t.src_type)):
            src = g.key(t.src_type, v)
            adj.setdefault(src, []).extend(g.key(t.dst_type, int(w)) for w in g.neighbors(v, t.name))
    return adj


def bfs(adj, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        x = q.popleft()
        for y in adj.get(x, ()):
            if y not in dist:
                dist[y] = dist[x] + 1
                q.append(y)
    return dist


def check_ego(g, ego, adj_by_rel, fanouts):
    violations = 0
    for r, rl in ego.per_relation.items():
        dist = bfs(adj_by_rel[r], ego.center)
        for k in range(ego.depth + 1):
            for node in rl.layer(k).tolist():
                if dist.get(node, 10**9) > k:
                    violations += 1
        children = Counter(int(p) for p, _ in rl.edges)
        for p, c in rl.edges:
            parent, child = int(rl.nodes[p]), int(rl.nodes[c])
            if child not in adj_by_rel[r].get(parent, ()):
                violations += 1
        for p, n in children.items():
            k = int(np.searchsorted(rl.layer_offsets, p, side="right")) - 1
            if n > fanouts[k]:
                violations += 1
    return violations


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_containment_property(seed):
    rng = np.random.default_rng(seed)
    g = random_bipartite(rng, 6, 6, 20, relations=("click", "buy"))
    adj = {r: relation_adjacency(g, r) for r in g.relation_names}
    fanouts = (2, 3)
    centers = np.concatenate([g.keys("u"), g.keys("i")])
    batch = sample_egos(g, centers, g.relation_names, fanouts, rng)
    assert sum(check_ego(g, batch.ego(e), adj, fanouts) for e in range(len(batch))) == 0


def test_without_replacement_capped_by_degree():
    edges = [("u2click2i", "u0", f"i{k}") for k in range(10)]
    g = build_graph(["u2click2i"], edges)
    for seed in range(20):
        ego = sample_ego(g, g.key("u", 0), ["click"], [4], np.random.default_rng(seed))
        hop = ego.layers("click")[1].tolist()
        assert len(hop) == 4 and len(set(hop)) == 4


def test_sampling_is_uniform():
    n = 10
    g = build_graph(["u2click2i"], [("u2click2i", "u0", f"i{k}") for k in range(n)])
    counts = Counter()
    trials = 4000
    rng = np.random.default_rng(0)
    batch = sample_egos(g, np.full(trials, g.key("u", 0)), ["click"], [3], rng)
    counts.update(batch.layers["click"][0].keys.tolist())
    p = 3 / n
    sd = np.sqrt(trials * p * (1 - p))
    assert all(abs(c - trials * p) <= 4 * sd for c in counts.values())


def test_counter_increments(click_graph):
    order = PipelineOrder()
    sample_ego(click_graph, click_graph.key("u", 0), ["click"], [2], np.random.default_rng(0), order)
    sample_egos(click_graph, click_graph.keys("u"), ["click"], [2], np.random.default_rng(0), order)
    assert order.ego_sample_counter == 1 + click_graph.num_nodes("u")


def test_take_and_concat_match_ego():
    rng = np.random.default_rng(2)
    g = random_bipartite(rng, 8, 8, 30)
    a = sample_egos(g, g.keys("u"), ["click"], (2, 2), rng)
    b = sample_egos(g, g.keys("i"), ["click"], (2, 2), rng)
    both = EgoBatch.concat([a, b])
    sub = both.take(np.array([9, 0, 9]))
    for e_sub, (src, e) in enumerate([(b, 1), (a, 0), (b, 1)]):
        x, y = sub.ego(e_sub), src.ego(e)
        assert x.center == y.center
        for r in x.per_relation:
            assert np.array_equal(x.per_relation[r].nodes, y.per_relation[r].nodes)
            assert np.array_equal(x.per_relation[r].edges, y.per_relation[r].edges)


def _stream(g, walks, mode, batch_size=7, walk_only=False):
    order = PipelineOrder(mode)
    batches = list(stream_training_batches(g, walks, 2, (2, 2), order, batch_size, rng=np.random.default_rng(0),
                                           walk_only=walk_only))
    return batches, order


def test_single_path_counters():
    g = build_graph(["u2click2i"], [("u2click2i", "u1", "i1"), ("u2click2i", "u2", "i1"),
                                    ("u2click2i", "u2", "i2")])
    mp = parse_metapath("u2click2i - i2click2u", g)
    cfg = WalkConfig([mp], walk_len=4, seed=0)
    walk = next(p for p in generate_walks(g, cfg) if len(p) == 4)
    _, ego = _stream(g, [walk], PipelineMode.EGO_FIRST)
    _, pair = _stream(g, [walk], PipelineMode.PAIR_FIRST)
    assert ego.ego_sample_counter == 4
    assert pair.ego_sample_counter == 20


def test_empty_stream_no_batches(click_graph):
    batches, order = _stream(click_graph, [], PipelineMode.EGO_FIRST)
    assert batches == [] and order.ego_sample_counter == 0


def _pairs(batches):
    return sorted(zip(np.concatenate([b.center_keys for b in batches]).tolist(),
                      np.concatenate([b.context_keys for b in batches]).tolist()))


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.integers(1, 50))
def test_modes_agree_and_batches_complete(seed, batch_size):
    rng = np.random.default_rng(seed)
    g = random_bipartite(rng, 6, 6, 20)
    walks = list(generate_walks(g, WalkConfig([parse_metapath("u2click2i - i2click2u", g)], 5, seed=seed)))
    eb, eo = _stream(g, walks, PipelineMode.EGO_FIRST, batch_size)
    pb, po = _stream(g, walks, PipelineMode.PAIR_FIRST, batch_size)
    expected = sorted((int(p.keys[i]), int(p.keys[j])) for p in walks for i, j in gen_pairs(p.nodes, 2))
    assert _pairs(eb) == _pairs(pb) == expected
    assert eo.ego_sample_counter == sum(len(p) for p in walks if len(p) > 1)
    assert po.ego_sample_counter == 2 * len(expected)
    assert all(len(b) == batch_size for b in eb[:-1]) and 1 <= len(eb[-1]) <= batch_size
    ctr = Counter(expected)
    assert all(ctr[(b, a)] == n for (a, b), n in ctr.items())


def test_batch_egos_align_with_pairs():
    rng = np.random.default_rng(9)
    g = random_bipartite(rng, 6, 6, 20)
    walks = list(generate_walks(g, WalkConfig([parse_metapath("u2click2i - i2click2u", g)], 5, seed=1)))
    for mode in PipelineMode:
        for b in _stream(g, walks, mode, 11)[0]:
            assert np.array_equal(b.egos.centers[b.center_ego], b.center_keys)
            assert np.array_equal(b.egos.centers[b.context_ego], b.context_keys)


def test_walk_only_skips_sampling():
    rng = np.random.default_rng(9)
    g = random_bipartite(rng, 6, 6, 20)
    walks = list(generate_walks(g, WalkConfig([parse_metapath("u2click2i - i2click2u", g)], 5, seed=1)))
    batches, order = _stream(g, walks, PipelineMode.PAIR_FIRST, walk_only=True)
    assert order.ego_sample_counter == 0 and batches


def test_pair_batch_provenance():
    g = build_graph(["u2click2i"], [("u2click2i", "u1", "i1")])
    walks = list(generate_walks(g, WalkConfig([parse_metapath("u2click2i - i2click2u", g)], 3, seed=0)))
    [b] = _stream(g, walks, PipelineMode.EGO_FIRST, 100)[0]
    pairs = list(b.pairs())
    assert [p.positions for p in pairs] == gen_pairs([0, 0, 0], 2)
    assert all(p.path_id == 0 for p in pairs)
    assert isinstance(PairBatch.concat([b, b]), PairBatch)
