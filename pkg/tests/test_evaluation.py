import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetrec.evaluation import (EvalConfig, evaluate, per_user_recall, recall_at_k, recommend, topn_similar,
                               write_report)

import eval_oracle


def test_topn_basic():
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert topn_similar(np.array([1.0, 0.0]), C, 1).tolist() == [0]


def test_topn_tie_lower_id_first():
    C = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    assert topn_similar(np.array([1.0, 0.0]), C, 2).tolist() == [0, 1]
    assert topn_similar(np.array([1.0, 0.0]), C, 2, exclude=[0]).tolist() == [1, 2]


def test_topn_fewer_than_n():
    C = np.eye(3)
    assert sorted(topn_similar(np.ones(3), C, 10, exclude=[1]).tolist()) == [0, 2]


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.integers(1, 60))
def test_topn_matches_full_sort(seed, N):
    rng = np.random.default_rng(seed)
    C = rng.integers(-2, 3, (50, 8)).astype(float)  # integer entries force ties
    q = rng.integers(-2, 3, 8).astype(float)
    excl = set(rng.choice(50, 5).tolist())
    assert topn_similar(q, C, N, sorted(excl)).tolist() == eval_oracle.topn(q, C, N, excl)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.01, 100))
def test_topn_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    C, q = rng.normal(size=(30, 4)), rng.normal(size=4)
    assert topn_similar(q, C, 7).tolist() == topn_similar(q, C * c, 7).tolist()


def test_u2i_example():
    I = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert recommend("u2i", 0, np.array([[1.0, 0.0]]), I, {}, EvalConfig(K=1)) == [0]


def test_icf_frequency_dominance():
    # items 0,1 trained; 2 is near both, 3 near only 0, 4 near only 1
    I = np.array([[1, 0, 0], [0, 1, 0], [0.7, 0.7, 0], [0.9, -0.5, 0], [-0.5, 0.9, 0]], dtype=float)
    recs = recommend("icf", 0, np.zeros((1, 3)), I, {0: [0, 1]}, EvalConfig(N=2, K=3))
    assert recs[0] == 2


def test_empty_history_gives_empty():
    I = np.eye(2)
    for s in ("icf", "ucf"):
        assert recommend(s, 0, np.eye(2), I, {}, EvalConfig()) == []


def test_recall_examples():
    assert recall_at_k({0: [1, 5]}, {0: {1, 2}}) == 0.5
    assert recall_at_k({0: [1, 2, 3]}, {0: {1, 2}}) == 1.0
    assert recall_at_k({0: [1], 1: [], 2: [1, 9]}, {0: {1}, 1: {4}, 2: {1, 2}}) == 0.5
    assert per_user_recall({}, {0: set()}) == {}


def _fixture(rng, n_users, n_items, d=4):
    U = rng.integers(-2, 3, (n_users, d)).astype(float)
    I = rng.integers(-2, 3, (n_items, d)).astype(float)
    history = {u: rng.choice(n_items, rng.integers(0, 4), replace=False).tolist() for u in range(n_users)}
    truth = {u: set(rng.choice(n_items, rng.integers(0, 3), replace=False).tolist()) for u in range(n_users)}
    return U, I, history, truth


def test_five_user_icf_fixture():
    rng = np.random.default_rng(2024)
    U, I, history, truth = _fixture(rng, 5, 8)
    cfg = EvalConfig(N=3, K=4, strategy="icf")
    for u in range(5):
        assert recommend("icf", u, U, I, history, cfg) == eval_oracle.recommend("icf", u, U, I, history, 3, 4)


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.sampled_from(["icf", "ucf", "u2i"]))
def test_oracle_equality(seed, strategy):
    rng = np.random.default_rng(seed)
    n_users, n_items = int(rng.integers(2, 40)), int(rng.integers(2, 60))
    U, I, history, truth = _fixture(rng, n_users, n_items)
    N, K = int(rng.integers(1, 6)), int(rng.integers(1, 10))
    r, recs = evaluate(U, I, history, truth, EvalConfig(N=N, K=K, strategy=strategy))
    expected = {u: eval_oracle.recommend(strategy, u, U, I, history, N, K) for u, t in truth.items() if t}
    assert recs == expected
    assert r == pytest.approx(eval_oracle.recall(expected, truth), abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.sampled_from(["icf", "ucf", "u2i"]))
def test_recall_monotone_in_k(seed, strategy):
    rng = np.random.default_rng(seed)
    U, I, history, truth = _fixture(rng, 10, 20)
    vals = [evaluate(U, I, history, truth, EvalConfig(N=5, K=K, strategy=strategy))[0] for K in (1, 3, 5, 10, 20)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_u2i_total_coverage():
    rng = np.random.default_rng(0)
    U, I, history, truth = _fixture(rng, 10, 15)
    r, _ = evaluate(U, I, history, truth, EvalConfig(K=15, strategy="u2i", exclude_train=False))
    assert r == 1.0


def test_config_validation_and_report():
    with pytest.raises(ValueError):
        EvalConfig(N=0)
    buf = io.StringIO()
    write_report([("icf", 100, 0.25)], buf)
    assert buf.getvalue() == "icf\t100\t0.250000\n"
