import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetrec.graph import GraphError, build_graph
from hetrec.walks import WalkConfig, generate_walks, parse_metapath

from conftest import random_bipartite


def test_parse_bipartite_metapath():
    mp = parse_metapath("u2click2i - i2click2u", ["u2click2i"])
    assert len(mp) == 2
    assert [mp.node_type_at(p) for p in range(3)] == ["u", "i", "u"]


def test_parse_homogeneous_metapath():
    mp = parse_metapath("u2u - u2u", ["u2u"])
    assert mp.start_type == "u" and len(mp) == 2


def test_chain_mismatch_names_the_pair():
    with pytest.raises(GraphError, match="u2click2i.*u2buy2i"):
        parse_metapath("u2click2i - u2buy2i", ["u2click2i", "u2buy2i"])


def test_cycle_mismatch():
    with pytest.raises(GraphError, match="cyclic"):
        parse_metapath("u2click2i", ["u2click2i"])


def test_unknown_relation():
    with pytest.raises(GraphError, match="unknown"):
        parse_metapath("u2view2i - i2view2u", ["u2click2i"])


def _walks(g, spec, **kw):
    cfg = WalkConfig([parse_metapath(spec, g)], **kw)
    return list(generate_walks(g, cfg))


def test_forced_chain_path():
    g = build_graph(["u2click2i"], [("u2click2i", "u1", "i1")])
    [p] = _walks(g, "u2click2i - i2click2u", walk_len=5)
    assert p.nodes.tolist() == [0, 0, 0, 0, 0]
    types = [g.key_type(k) for k in p.keys]
    assert types == ["u", "i", "u", "i", "u"]


def test_dead_end_truncates():
    g = build_graph(["u2click2i", "u2buy2i"], [("u2click2i", "u1", "i1"), ("u2buy2i", "u2", "i1")])
    walks = _walks(g, "u2click2i - i2click2u", walk_len=6)
    by_start = {int(p.nodes[0]): p for p in walks}
    assert len(by_start[g.index("u", "u2")]) == 1


def test_same_seed_same_multiset():
    g = random_bipartite(np.random.default_rng(3), 20, 20, 80)
    a = sorted(tuple(p.keys.tolist()) for p in _walks(g, "u2click2i - i2click2u", walk_len=8, seed=7))
    b = sorted(tuple(p.keys.tolist()) for p in _walks(g, "u2click2i - i2click2u", walk_len=8, seed=7))
    assert a == b


def test_worker_and_chunk_invariance():
    g = random_bipartite(np.random.default_rng(4), 30, 30, 120)
    mp = [parse_metapath("u2click2i - i2click2u", g)]
    ref = sorted(tuple(p.keys.tolist()) for p in generate_walks(g, WalkConfig(mp, 8, 2, seed=1)))
    alt = sorted(tuple(p.keys.tolist()) for p in
                 generate_walks(g, WalkConfig(mp, 8, 2, seed=1, workers=3, chunk_size=7)))
    assert ref == alt


def test_walks_per_node_and_start():
    g = random_bipartite(np.random.default_rng(5), 10, 10, 40)
    walks = _walks(g, "u2click2i - i2click2u", walk_len=4, walks_per_node=3)
    starts = sorted(int(p.nodes[0]) for p in walks)
    assert starts == sorted(list(range(g.num_nodes("u"))) * 3)


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_validity_type_pattern_and_length(seed, walk_len):
    rng = np.random.default_rng(seed)
    g = random_bipartite(rng, 8, 8, 30, relations=("click", "buy"))
    mp = parse_metapath("u2click2i - i2buy2u", g)
    for p in generate_walks(g, WalkConfig([mp], walk_len, seed=seed)):
        assert 1 <= len(p) <= walk_len
        for t in range(len(p) - 1):
            step = mp.steps[t % len(mp)]
            assert p.nodes[t + 1] in g.neighbors(int(p.nodes[t]), step.name)
        for t, k in enumerate(p.keys):
            assert g.key_type(int(k)) == mp.node_type_at(t)


def test_first_step_uniform_on_star():
    n = 20
    g = build_graph(["c2link2l"], [("c2link2l", "c", f"l{k}") for k in range(n)])
    mp = parse_metapath("c2link2l - l2link2c", g)
    counts = np.zeros(n)
    for p in generate_walks(g, WalkConfig([mp], walk_len=2, walks_per_node=100 * n, seed=11)):
        counts[p.nodes[1]] += 1
    trials = 100 * n
    mean, sd = trials / n, np.sqrt(trials * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - mean) <= 3 * sd)


def test_start_order_shuffled_per_epoch():
    g = random_bipartite(np.random.default_rng(6), 50, 50, 200)
    cfg = WalkConfig([parse_metapath("u2click2i - i2click2u", g)], 3, seed=2)
    e0 = [int(p.nodes[0]) for p in generate_walks(g, cfg, epoch=0)]
    e1 = [int(p.nodes[0]) for p in generate_walks(g, cfg, epoch=1)]
    assert sorted(e0) == sorted(e1) and e0 != e1
