import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpoly.metrics import exact_match, lcs_length, rouge1, rougeL, rougeLsum, sequence_metrics

from oracles import lcs_bruteforce, rouge_l_f1

tokens = st.lists(st.integers(0, 5), max_size=12)


def test_hand_example():
    assert rougeL("the cat sat".split(), "the cat".split()) == pytest.approx(0.8, abs=1e-15)


def test_rougeL_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.integers(0, 6, size=rng.integers(0, 15)).tolist()
        b = rng.integers(0, 6, size=rng.integers(0, 15)).tolist()
        assert lcs_length(a, b) == lcs_bruteforce(a, b)
        assert rougeL(a, b) == rouge_l_f1(a, b)


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_lcs_is_symmetric_and_bounded(a, b):
    n = lcs_length(a, b)
    assert n == lcs_length(b, a) <= min(len(a), len(b))


def test_identical_and_disjoint():
    seq = [3, 4, 5, 4]
    m = sequence_metrics([seq], [seq])
    assert all(v == 1.0 for v in m.values())
    m = sequence_metrics([[1, 2]], [[3, 4, 5]])
    assert all(v == 0.0 for v in m.values())


def test_rouge1_counts_clipped_overlap():
    # pred has two 'a', ref one: overlap 1 -> P=1/3, R=1/2
    assert rouge1(["a", "a", "b"], ["a", "c"]) == pytest.approx(2 * (1 / 3) * (1 / 2) / (1 / 3 + 1 / 2))


def test_rougeLsum_single_segment_equals_rougeL():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.integers(1, 6, size=8).tolist()
        b = rng.integers(1, 6, size=8).tolist()
        assert rougeLsum(a, b, sep=0) == pytest.approx(rougeL(a, b), abs=1e-15)


def test_rougeLsum_takes_union_over_predicted_segments():
    # ref segment "a b c d"; predicted segments "a b" and "c d" each cover half -> union covers all
    ref = ["a", "b", "c", "d"]
    pred = ["a", "b", "\n", "c", "d"]
    assert rougeLsum(pred, ref) == 1.0
    assert rougeL([t for t in pred if t != "\n"], ref) == 1.0
    assert rougeLsum(["d", "c", "\n", "b", "a"], ref) == pytest.approx(0.5)


def test_exact_match_and_errors():
    assert exact_match([1, 2], (1, 2)) == 1.0 and exact_match([1], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        sequence_metrics([[1]], [[1], [2]])
    with pytest.raises(ValueError):
        sequence_metrics([], [])
