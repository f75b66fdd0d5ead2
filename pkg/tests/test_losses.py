import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import logsumexp

from services.errors import InvalidArgumentError
from services.losses import (
    LOSS_NAMES,
    Loss,
    MarginTable,
    build_margin_table,
    log_esp,
    log_esp_marginals,
    loss_cal_hinge_topk,
    loss_ce,
    loss_cvx_hinge_topk,
    loss_focal,
    loss_hinge_topk,
    loss_ldam,
    loss_noised_balanced,
    loss_noised_imbalanced,
    loss_smoothed_hinge_berrada,
    loss_topk_01,
    make_loss,
    margin_table_from_max,
)
from services.smoothing import NoiseBatch, sample_noise
from utils.numerics import finite_differences

finite = st.floats(min_value=-20, max_value=20, allow_nan=False, allow_infinity=False)


def brute_force_smoothed_hinge(s, y, K, tau):
    L = s.shape[0]
    with_y, without = [], []
    for A in itertools.combinations(range(L), K):
        base = s[list(A)].sum() / (K * tau)
        without.append(base)
        with_y.append(base + (0.0 if y in A else 1.0 / tau))
    return tau * logsumexp(with_y) - tau * logsumexp(without)


# ======================
# DEFINITIONS
# ======================

def test_topk_01():
    s = [2.4, 2.6, 2.3, 0.5]
    assert loss_topk_01(s, 0, 2) == 0.0
    assert loss_topk_01(s, 2, 2) == 1.0
    assert loss_topk_01(s, 2, 3) == 0.0


def test_topk_01_tie_counts_as_hit():
    assert loss_topk_01([1.0, 1.0, 0.0], 1, 1) == 0.0


def test_ce_matches_log_softmax():
    s = np.array([1.0, 2.0, 0.5])
    out = loss_ce(s, 1)
    expected = -(2.0 - logsumexp(s))
    assert out.value == pytest.approx(expected, abs=1e-14)
    p = np.exp(s - logsumexp(s))
    np.testing.assert_allclose(out.grad, p - np.array([0, 1, 0]), atol=1e-15)


def test_hinge_and_cal_hinge_values():
    s = np.array([2.4, 2.6, 2.3, 0.5])
    # hinge: top_2 of s without s_3 is 2.4
    assert loss_hinge_topk(s, 3, 2).value == pytest.approx(1 + 2.4 - 0.5)
    # calibrated hinge uses top_3 of all scores
    assert loss_cal_hinge_topk(s, 3, 2).value == pytest.approx(1 + 2.3 - 0.5)
    np.testing.assert_array_equal(loss_cal_hinge_topk(s, 3, 2).grad, [0, 0, 1, -1])
    assert loss_cal_hinge_topk(s, 1, 2).value == pytest.approx(1 + 2.3 - 2.6)


def test_cvx_hinge_upper_bounds_hinge(rng):
    for _ in range(200):
        s = rng.standard_normal(6) * 2
        y = int(rng.integers(6))
        for K in (1, 2, 3):
            assert loss_cvx_hinge_topk(s, y, K).value >= loss_hinge_topk(s, y, K).value - 1e-12


def test_hinge_range_of_k():
    with pytest.raises(InvalidArgumentError):
        loss_hinge_topk([1.0, 2.0, 3.0], 0, 3)
    with pytest.raises(InvalidArgumentError):
        loss_cal_hinge_topk([1.0, 2.0, 3.0], 0, 3)


def test_focal_literal_expression():
    s = np.array([0.3, 1.2, -0.4])
    ce = loss_ce(s, 0).value
    out = loss_focal(s, 0, 2.0, literal=True)
    assert out.value == pytest.approx((1 - np.log(ce)) ** 2 * ce)


def test_focal_literal_rejects_cross_entropy_above_e():
    # ce = ln(1 + e^10 + e^5) ~ 10 > e
    with pytest.raises(InvalidArgumentError):
        loss_focal([-5.0, 5.0, 0.0], 0, 2.0, literal=True)
    assert np.isfinite(loss_focal([-5.0, 5.0, 0.0], 0, 2.0).value)


def test_focal_standard_form():
    s = np.array([0.3, 1.2, -0.4])
    ce = loss_ce(s, 0).value
    p = np.exp(-ce)
    assert loss_focal(s, 0, 2.0).value == pytest.approx((1 - p) ** 2 * ce)


# ======================
# REDUCTIONS
# ======================

def test_noised_losses_at_zero_epsilon_are_the_calibrated_hinge(rng):
    noise = sample_noise(8, 4, seed=1)
    counts = [100, 60, 40, 30, 20, 10, 5, 2]
    margins = build_margin_table(counts, 1.0)
    for _ in range(50):
        s = rng.standard_normal(8)
        y = int(rng.integers(8))
        for K in (1, 3, 7):
            ref = loss_cal_hinge_topk(s, y, K)
            bal = loss_noised_balanced(s, y, K, 0.0, noise)
            assert bal.value == ref.value
            np.testing.assert_array_equal(bal.grad, ref.grad)
            # the imbalanced loss differs only through the margin
            imb = loss_noised_imbalanced(s, y, K, 0.0, noise, margins)
            t = margins.margins[y] - 1.0 + ref.value
            if ref.value > 0 and t > 0:
                assert imb.value == pytest.approx(t, abs=1e-12)


def test_unit_margins_reduce_imbalanced_to_balanced(rng):
    noise = sample_noise(6, 5, seed=2)
    unit = build_margin_table([1, 1, 1, 1, 1, 1], 1.0)
    np.testing.assert_array_equal(unit.margins, np.ones(6))
    for _ in range(50):
        s = rng.standard_normal(6)
        y = int(rng.integers(6))
        a = loss_noised_balanced(s, y, 2, 0.5, noise)
        b = loss_noised_imbalanced(s, y, 2, 0.5, noise, unit)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)


def test_zero_ldam_margins_reduce_to_ce(rng):
    zero = Loss(name="ldam", margins=MarginTable(margins=np.zeros(3), C=0.0, counts=np.array([5, 5, 5])))
    for _ in range(20):
        s = rng.standard_normal(3)
        y = int(rng.integers(3))
        a, b = zero.evaluate(s, y), loss_ce(s, y)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)


def test_focal_gamma_zero_is_ce(rng):
    for _ in range(20):
        s = rng.standard_normal(5)
        y = int(rng.integers(5))
        a, b = loss_focal(s, y, 0.0), loss_ce(s, y)
        assert a.value == b.value
        np.testing.assert_array_equal(a.grad, b.grad)


# ======================
# MARGINS
# ======================

def test_margin_table():
    table = build_margin_table([10000, 16, 1], 2.0)
    np.testing.assert_allclose(table.margins, [0.2, 1.0, 2.0])
    assert table.max_margin == 2.0
    assert margin_table_from_max([10000, 16, 1], 0.5).max_margin == pytest.approx(0.5)


def test_rare_class_carries_the_larger_margin():
    C = 0.2 * 10 ** 0.25
    table = build_margin_table([10000, 10], C)
    assert table.margins[1] == pytest.approx(0.2)
    assert table.margins[0] == pytest.approx(0.2 * (10 / 10000) ** 0.25)
    assert table.margins[0] == pytest.approx(0.035566, abs=1e-6)
    assert table.margins[1] / table.margins[0] == pytest.approx(1000 ** 0.25)


def _uniform_margins(m, L=2):
    return MarginTable(margins=np.full(L, m), C=m, counts=np.ones(L, dtype=np.int64))


def test_ldam_at_zero_scores():
    # s' = (-ln 2, 0): -log(e^{-ln 2} / (e^{-ln 2} + 1)) = ln 3
    for y in (0, 1):
        out = loss_ldam([0.0, 0.0], y, _uniform_margins(np.log(2.0)))
        assert out.value == pytest.approx(np.log(3.0), abs=1e-12)


def test_ldam_grows_with_the_margin(rng):
    grid = np.linspace(0.0, 3.0, 13)
    for _ in range(20):
        s = rng.standard_normal(5)
        y = int(rng.integers(5))
        values = [loss_ldam(s, y, _uniform_margins(m, 5)).value for m in grid]
        assert np.all(np.diff(values) > 0)


@pytest.mark.parametrize("counts, C", [([0, 3], 1.0), ([2.5, 3], 1.0), ([3, 4], 0.0), ([], 1.0)])
def test_margin_table_rejects(counts, C):
    with pytest.raises(InvalidArgumentError):
        build_margin_table(counts, C)


def test_margin_classes_must_match_scores():
    with pytest.raises(InvalidArgumentError):
        loss_ldam([0.1, 0.2, 0.3], 0, build_margin_table([1, 2], 1.0))


# ======================
# K-SUBSET SMOOTHED HINGE
# ======================

def test_log_esp_small_cases():
    x = np.log(np.array([1.0, 2.0, 3.0]))
    assert np.exp(log_esp(x, 0)) == pytest.approx(1.0)
    assert np.exp(log_esp(x, 1)) == pytest.approx(6.0)
    assert np.exp(log_esp(x, 2)) == pytest.approx(11.0)
    assert np.exp(log_esp(x, 3)) == pytest.approx(6.0)
    _, marg = log_esp_marginals(x, 2)
    # weights of the pairs {0,1}=2, {0,2}=3, {1,2}=6
    np.testing.assert_allclose(marg, [5 / 11, 8 / 11, 9 / 11])
    assert marg.sum() == pytest.approx(2.0)


@pytest.mark.slow
def test_smoothed_hinge_matches_brute_force():
    rng = np.random.default_rng(7)
    for L in (3, 6, 9, 12):
        for K in range(1, min(5, L - 1) + 1):
            for _ in range(100):
                s = rng.standard_normal(L) * 3
                y = int(rng.integers(L))
                tau = float(rng.choice([0.1, 1.0]))
                expected = brute_force_smoothed_hinge(s, y, K, tau)
                got = loss_smoothed_hinge_berrada(s, y, K, tau).value
                assert got == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_smoothed_hinge_handles_extreme_scores():
    s = np.array([800.0, -800.0, 0.0, 1.0])
    out = loss_smoothed_hinge_berrada(s, 1, 2, 0.1)
    assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))


def test_smoothed_hinge_tends_to_the_hard_subset_hinge(rng):
    # each log-sum-exp is within tau * log(C(L, K)) of its max
    L, K, tau = 6, 2, 1e-3
    subsets = list(itertools.combinations(range(L), K))
    for _ in range(30):
        s = rng.standard_normal(L)
        y = int(rng.integers(L))
        means = [s[list(A)].mean() for A in subsets]
        hard = max(m + (0.0 if y in A else 1.0) for m, A in zip(means, subsets)) - max(means)
        got = loss_smoothed_hinge_berrada(s, y, K, tau).value
        assert abs(got - hard) <= tau * np.log(len(subsets)) + 1e-9


# ======================
# GRADIENTS
# ======================

def _numeric_grad(loss, s, y, noise):
    return finite_differences(lambda P: loss(P, y, noise), s, 1e-5)


@pytest.mark.parametrize("name", ["ce", "ldam", "focal"])
def test_smooth_loss_gradients(name, rng):
    counts = [100, 50, 20, 10, 5, 2]
    margins = margin_table_from_max(counts, 0.5) if name == "ldam" else None
    loss = make_loss(name, gamma=2.0, margins=margins)
    for _ in range(100):
        s = rng.standard_normal(6)
        y = int(rng.integers(6))
        central, _, _ = _numeric_grad(loss, s, y, None)
        np.testing.assert_allclose(loss.evaluate(s, y).grad, central, atol=1e-8)


def test_smoothed_hinge_gradient(rng):
    loss = make_loss("smoothed_hinge", K=3, tau=0.5)
    for _ in range(100):
        s = rng.standard_normal(8)
        y = int(rng.integers(8))
        central, _, _ = _numeric_grad(loss, s, y, None)
        np.testing.assert_allclose(loss.evaluate(s, y).grad, central, atol=1e-6)


@pytest.mark.parametrize("name", ["noised_balanced", "noised_imbalanced", "hinge", "cvx_hinge", "cal_hinge"])
def test_piecewise_loss_gradients_away_from_kinks(name, rng):
    L, K, B = 10, 3, 5
    margins = margin_table_from_max(np.arange(100, 0, -10), 0.5) if name == "noised_imbalanced" else None
    loss = make_loss(name, K=K, epsilon=0.5, B=B, margins=margins)
    checked = 0
    while checked < 100:
        s = rng.standard_normal(L)
        y = int(rng.integers(L))
        noise = NoiseBatch.from_array(rng.standard_normal((B, L)))
        central, forward, backward = _numeric_grad(loss, s, y, noise)
        if np.max(np.abs(forward - backward)) > 1e-4:
            continue
        np.testing.assert_allclose(loss.evaluate(s, y, noise).grad, central, atol=1e-4)
        checked += 1


# ======================
# PROPERTIES
# ======================

@given(arrays(np.float64, 6, elements=finite), st.integers(0, 5), st.integers(1, 4))
@settings(max_examples=100, deadline=None)
def test_hinge_family_is_nonnegative(s, y, K):
    assert loss_hinge_topk(s, y, K).value >= 0
    assert loss_cvx_hinge_topk(s, y, K).value >= 0
    assert loss_cal_hinge_topk(s, y, K).value >= 0
    assert loss_smoothed_hinge_berrada(s, y, K, 1.0).value >= 0


@pytest.mark.parametrize(
    "name", ["topk_01", "ce", "ldam", "focal", "hinge", "cvx_hinge", "cal_hinge", "noised_balanced", "noised_imbalanced"]
)
def test_every_loss_is_nonnegative_on_random_draws(name, rng):
    L, K, B, N = 8, 3, 4, 10_000
    counts = [500, 200, 100, 50, 20, 10, 5, 2]
    margins = margin_table_from_max(counts, 0.5) if name in ("ldam", "noised_imbalanced") else None
    loss = make_loss(name, K=K, epsilon=0.5, B=B, gamma=2.0, margins=margins)
    S = rng.standard_normal((N, L)) * rng.uniform(0.1, 10.0, size=(N, 1))
    Y = rng.integers(L, size=N)
    values, _ = loss.evaluate_batch(S, Y, sample_noise(L, B, seed=3))
    assert values.shape == (N,)
    assert np.all(values >= 0)


@given(arrays(np.float64, 5, elements=finite), st.integers(0, 4), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_translation_invariance(s, y, c):
    noise = sample_noise(5, 3, seed=0)
    a = loss_noised_balanced(s, y, 2, 0.3, noise)
    b = loss_noised_balanced(s + c, y, 2, 0.3, noise)
    assert b.value == pytest.approx(a.value, abs=1e-9)
    assert loss_ce(s + c, y).value == pytest.approx(loss_ce(s, y).value, abs=1e-9)


@given(
    arrays(np.float64, 6, elements=finite),
    arrays(np.float64, 6, elements=finite),
    st.integers(0, 5),
    st.floats(0.0, 1.0),
)
@settings(max_examples=100, deadline=None)
def test_cvx_hinge_is_convex_in_the_scores(s1, s2, y, lam):
    f = lambda s: loss_cvx_hinge_topk(s, y, 2).value  # noqa: E731
    mid = lam * s1 + (1 - lam) * s2
    assert f(mid) <= lam * f(s1) + (1 - lam) * f(s2) + 1e-9


def test_registry_and_factory():
    assert set(LOSS_NAMES) == {
        "topk_01", "ce", "ldam", "focal", "hinge", "cvx_hinge",
        "cal_hinge", "smoothed_hinge", "noised_balanced", "noised_imbalanced",
    }
    with pytest.raises(InvalidArgumentError):
        make_loss("nope")
    with pytest.raises(InvalidArgumentError):
        make_loss("ldam")
    with pytest.raises(InvalidArgumentError):
        make_loss("ce", colour="red")
    for bad in ({"B": 0}, {"epsilon": -0.1}, {"K": 0}):
        with pytest.raises(InvalidArgumentError):
            make_loss("noised_balanced", **bad)
    with pytest.raises(InvalidArgumentError):
        make_loss("noised_balanced", K=2, epsilon=0.5, B=3).evaluate([0.0, 1.0, 2.0], 0)
    assert make_loss("topk_01").has_gradient is False
    assert make_loss("noised_balanced", epsilon=0.0).needs_noise is False


def test_batched_values_match_single(rng):
    noise = sample_noise(7, 3, seed=4)
    S = rng.standard_normal((12, 7))
    Y = rng.integers(7, size=12)
    for name in ("ce", "hinge", "noised_balanced", "smoothed_hinge"):
        loss = make_loss(name, K=2, epsilon=0.2, B=3)
        values, grads = loss.evaluate_batch(S, Y, noise)
        for i in range(12):
            single = loss.evaluate(S[i], int(Y[i]), noise)
            assert values[i] == pytest.approx(single.value, abs=1e-12)
            np.testing.assert_allclose(grads[i], single.grad, atol=1e-12)
