import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from sklearn.metrics import adjusted_rand_score

from cpoly.analysis import (
    adjusted_rand_index,
    cluster_tasks,
    export_heatmap,
    minmax_columns,
    routing_ari,
    routing_profiles,
)
from cpoly.routing import init_allocation, routing_weights

from oracles import ari_by_pairs, average_linkage_bruteforce

labels = st.lists(st.integers(0, 3), min_size=2, max_size=12)


def test_identical_profiles_merge_at_zero():
    d = cluster_tasks(np.array([[0.2, 0.8], [0.2, 0.8], [0.9, 0.1]]))
    assert d.merges[0][:3] == (0, 1, 0.0)


def test_simplex_corners_merge_lowest_pair_first():
    # all pairwise distances equal sqrt(2): tie rule picks (0, 1)
    d = cluster_tasks(np.eye(3))
    assert d.merges[0][:2] == (0, 1)
    assert d.merges[1][:2] == (3, 2)  # left holds the smaller member task
    assert d.merges[1][2] == pytest.approx(np.sqrt(2), rel=1e-15)


def test_matches_bruteforce_linkage():
    rng = np.random.default_rng(0)
    for trial in range(30):
        X = rng.random(size=(rng.integers(2, 9), 5))
        if trial % 3 == 0:
            X = np.round(X, 1)  # induce ties
        got = cluster_tasks(X).merges
        want = average_linkage_bruteforce(X.tolist())
        assert [(a, b) for a, b, _, _ in got] == [(a, b) for a, b, _ in want]
        assert np.allclose([m[2] for m in got], [w[2] for w in want], rtol=1e-12, atol=0)


def test_cut_agrees_with_scipy_average_linkage():
    rng = np.random.default_rng(1)
    for _ in range(30):
        X = rng.random(size=(8, 6))
        ours = cluster_tasks(X)
        Z = linkage(X, method="average", metric="euclidean")
        assert np.allclose(sorted(m[2] for m in ours.merges), sorted(Z[:, 2]), rtol=1e-12)
        for k in (2, 3, 4):
            assert adjusted_rand_index(ours.cut(k), fcluster(Z, k, criterion="maxclust")) == 1.0


def test_scaling_profiles_keeps_tree_shape():
    rng = np.random.default_rng(2)
    X = rng.random(size=(7, 4))
    a, b = cluster_tasks(X), cluster_tasks(3.5 * X)
    assert [m[:2] for m in a.merges] == [m[:2] for m in b.merges]


def test_cut_gives_k_groups_and_outputs():
    d = cluster_tasks(np.array([[0.0], [0.1], [5.0], [5.2]]))
    assert d.cut(2) == [0, 0, 1, 1]
    assert d.cut(4) == [0, 1, 2, 3] and d.cut(1) == [0, 0, 0, 0]
    assert sorted(d.leaf_order()) == [0, 1, 2, 3]
    assert d.to_newick().startswith("((task0:") and d.to_newick().endswith(");")
    assert json.loads(d.to_json())["n_leaves"] == 4
    with pytest.raises(ValueError):
        d.cut(5)


def test_cluster_input_errors():
    with pytest.raises(ValueError):
        cluster_tasks(np.zeros(3))
    with pytest.raises(ValueError):
        cluster_tasks(np.zeros((1, 3)))


def test_ari_examples():
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 9, 9]) == 1.0
    assert adjusted_rand_index([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(-0.5)
    assert adjusted_rand_index([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0
    with pytest.raises(ValueError):
        adjusted_rand_index([], [])
    with pytest.raises(ValueError):
        adjusted_rand_index([0, 1], [0])


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_ari_against_pair_oracle_and_sklearn(data):
    x = data.draw(labels)
    y = data.draw(st.lists(st.integers(0, 3), min_size=len(x), max_size=len(x)))
    ari = adjusted_rand_index(x, y)
    assert ari == pytest.approx(ari_by_pairs(x, y), abs=1e-12)
    assert ari == pytest.approx(adjusted_rand_score(y, x), abs=1e-12)
    assert ari == pytest.approx(adjusted_rand_index(y, x), abs=1e-12)
    relabel = {v: 10 - v for v in set(x)}
    assert adjusted_rand_index([relabel[v] for v in x], y) == pytest.approx(ari, abs=1e-12)


def trained_looking(T=4, A=3, groups=(0, 0, 1, 1), seed=0):
    alloc = init_allocation(T, A, seed=seed, variant="poly")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=3.0, size=(max(groups) + 1, A))
    alloc.logits_A.data = centers[list(groups)] + rng.normal(scale=0.05, size=(T, A))
    return alloc


def test_profiles_are_normalized_eval_weights():
    allocs = {"a": trained_looking(), "b": trained_looking(A=2, seed=1)}
    P = routing_profiles(allocs)
    assert P.shape == (4, 5)
    assert np.allclose(P[:, :3].sum(axis=1), 1.0) and np.allclose(P[:, 3:].sum(axis=1), 1.0)
    assert np.array_equal(P[2, :3], routing_weights(allocs["a"], 2, "eval").common.data[0])


def test_routing_ari_recovers_planted_groups():
    ari, dendro = routing_ari({"q": trained_looking(T=6, groups=(0, 0, 1, 1, 2, 2), seed=3)}, [0, 0, 1, 1, 2, 2])
    assert ari == 1.0 and dendro.n_leaves == 6


def test_minmax_columns():
    rows = [[0, 1.0, 2.0, 3.0], [1, 3.0, 2.0, 4.0]]
    assert minmax_columns(rows) == [[0, 0.0, 0.0, 0.0], [1, 1.0, 0.0, 1.0]]


def test_heatmap_export_is_reproducible(tmp_path):
    allocs = {"layer0.q": trained_looking(), "layer0.v": trained_looking(seed=2)}
    first = export_heatmap(allocs, tmp_path / "a")
    second = export_heatmap(allocs, tmp_path / "b")
    assert len(first) == 4
    for p, q in zip(first, second):
        assert p.read_bytes() == q.read_bytes()
    lines = (tmp_path / "a" / "allocation_layer0.q.csv").read_text().strip().splitlines()
    assert len(lines) == 5


def test_uniform_allocation_heatmap_is_constant(tmp_path):
    alloc = init_allocation(3, 4, seed=0, variant="poly")
    alloc.logits_A.data[...] = 0.0
    export_heatmap({"m": alloc}, tmp_path)
    rows = [line.split(",") for line in (tmp_path / "allocation_m.csv").read_text().strip().splitlines()[1:]]
    assert {float(v) for r in rows for v in r[1:]} == {0.25}
    scaled = (tmp_path / "allocation_m.minmax.csv").read_text().strip().splitlines()[1:]
    assert {float(v) for r in scaled for v in r.split(",")[1:]} == {0.0}
