import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from services.errors import InvalidArgumentError
from services.scores import (
    argtop_k,
    argtops_k,
    batch_rank,
    batch_top_k,
    batch_topsum_k,
    rank_of,
    top_k,
    topsum_k,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
score_vectors = st.integers(min_value=2, max_value=12).flatmap(lambda L: arrays(np.float64, L, elements=finite))


def test_worked_vector():
    s = [2.4, 2.6, 2.3, 0.5]
    assert top_k(s, 1) == 2.6
    assert top_k(s, 2) == 2.4
    assert topsum_k(s, 2) == pytest.approx(5.0)
    np.testing.assert_array_equal(argtop_k(s, 2), [1, 0, 0, 0])
    np.testing.assert_array_equal(argtops_k(s, 2), [1, 1, 0, 0])


def test_ties_go_to_the_lowest_index():
    s = [1.0, 3.0, 3.0, 0.0]
    np.testing.assert_array_equal(argtop_k(s, 1), [0, 1, 0, 0])
    np.testing.assert_array_equal(argtop_k(s, 2), [0, 0, 1, 0])
    np.testing.assert_array_equal(argtops_k(s, 1), [0, 1, 0, 0])
    assert rank_of(s, 1) == 0
    assert rank_of(s, 2) == 1


def test_topsum_zero_and_full():
    s = [0.5, -1.0, 2.0]
    assert topsum_k(s, 0) == 0.0
    assert topsum_k(s, 3) == pytest.approx(1.5)
    assert top_k(s, 3) == -1.0


@pytest.mark.parametrize("K", [0, 5, -1])
def test_top_k_rejects_out_of_range(K):
    with pytest.raises(InvalidArgumentError):
        top_k([1.0, 2.0, 3.0, 4.0], K)


def test_rejects_bad_vectors():
    with pytest.raises(InvalidArgumentError):
        top_k([1.0], 1)
    with pytest.raises(InvalidArgumentError):
        top_k([1.0, np.nan], 1)
    with pytest.raises(InvalidArgumentError):
        topsum_k([[1.0, 2.0]], 1)


def test_batch_matches_rows(rng):
    S = rng.standard_normal((20, 7))
    for K in range(1, 8):
        expected_top = [top_k(row, K) for row in S]
        expected_sum = [topsum_k(row, K) for row in S]
        np.testing.assert_array_equal(batch_top_k(S, K), expected_top)
        np.testing.assert_allclose(batch_topsum_k(S, K), expected_sum, rtol=1e-14)


def test_batch_rank_agrees_with_rank_of(rng):
    S = np.round(rng.standard_normal((50, 6)), 1)  # rounding creates ties
    Y = rng.integers(6, size=50)
    np.testing.assert_array_equal(batch_rank(S, Y), [rank_of(s, y) for s, y in zip(S, Y)])


@given(score_vectors, st.data())
@settings(max_examples=100, deadline=None)
def test_topsum_is_sum_of_tops(s, data):
    K = data.draw(st.integers(min_value=1, max_value=s.shape[0]))
    assert topsum_k(s, K) == pytest.approx(sum(top_k(s, k) for k in range(1, K + 1)), rel=1e-12, abs=1e-9)


@given(score_vectors, st.data())
@settings(max_examples=100, deadline=None)
def test_permutation_equivariance(s, data):
    L = s.shape[0]
    K = data.draw(st.integers(min_value=1, max_value=L))
    perm = np.asarray(data.draw(st.permutations(range(L))))
    assert top_k(s[perm], K) == top_k(s, K)
    assert topsum_k(s[perm], K) == pytest.approx(topsum_k(s, K), rel=1e-12, abs=1e-9)


@given(score_vectors, st.data())
@settings(max_examples=100, deadline=None)
def test_indicators_are_consistent(s, data):
    L = s.shape[0]
    K = data.draw(st.integers(min_value=1, max_value=L))
    ind = argtop_k(s, K)
    inds = argtops_k(s, K)
    assert ind.sum() == 1 and inds.sum() == K
    assert s[np.argmax(ind)] == top_k(s, K)
    assert np.all(inds >= ind)
    assert (inds * s).sum() == pytest.approx(topsum_k(s, K), rel=1e-12, abs=1e-9)


@given(score_vectors, st.data(), finite)
@settings(max_examples=100, deadline=None)
def test_translation(s, data, c):
    K = data.draw(st.integers(min_value=1, max_value=s.shape[0]))
    assert top_k(s + c, K) == pytest.approx(top_k(s, K) + c, rel=1e-12, abs=1e-9)
    assert topsum_k(s + c, K) == pytest.approx(topsum_k(s, K) + K * c, rel=1e-12, abs=1e-8)


@given(score_vectors, st.data())
@settings(max_examples=100, deadline=None)
def test_topsum_is_midpoint_convex(s, data):
    L = s.shape[0]
    K = data.draw(st.integers(min_value=1, max_value=L))
    t = data.draw(arrays(np.float64, L, elements=finite))
    mid = topsum_k(0.5 * (s + t), K)
    assert mid <= 0.5 * (topsum_k(s, K) + topsum_k(t, K)) + 1e-9


def test_argtops_maximizes_the_inner_product_over_k_hot_vectors(rng):
    for L in (3, 5, 8):
        for _ in range(20):
            s = np.round(rng.standard_normal(L), 1)  # ties included
            for K in range(1, L + 1):
                best = max(s[list(A)].sum() for A in itertools.combinations(range(L), K))
                z = argtops_k(s, K)
                assert set(np.unique(z)) <= {0.0, 1.0} and z.sum() == K
                assert z @ s == pytest.approx(best, abs=1e-12)
