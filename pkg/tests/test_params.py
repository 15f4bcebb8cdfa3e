import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softquant import (
    quantiles_free,
    quantiles_pinned,
    vjp_quantiles_free,
    vjp_quantiles_pinned,
    vjp_weights,
    weights_from_precursor,
)
from softquant.exceptions import InvalidRange
from softquant.gradcheck import check_param_vjps
from softquant.params import init_factor_precursors, vjp_factors

finite_rows = st.lists(
    st.floats(min_value=-30, max_value=30, allow_nan=False), min_size=2, max_size=8
)


class TestWeights:
    def test_uniform_from_zeros(self):
        np.testing.assert_array_equal(
            weights_from_precursor(np.zeros(4)), np.full(4, 0.25)
        )

    def test_shift_invariance(self, rng):
        F = rng.standard_normal(6)
        np.testing.assert_allclose(
            weights_from_precursor(F), weights_from_precursor(F + 3.7), rtol=1e-14
        )

    def test_two_entry_formula(self):
        np.testing.assert_allclose(
            weights_from_precursor(np.array([0.0, np.log(3)])), [0.25, 0.75]
        )

    @given(finite_rows)
    @settings(max_examples=100, deadline=None)
    def test_always_a_probability_vector(self, row):
        w = weights_from_precursor(np.array(row))
        assert (w > 0).all()
        assert abs(w.sum() - 1.0) < 1e-12

    @given(finite_rows)
    @settings(max_examples=100, deadline=None)
    def test_vjp_orthogonal_to_ones(self, row):
        w = weights_from_precursor(np.array(row))
        c = np.arange(1.0, len(row) + 1.0)
        assert abs(vjp_weights(c, w).sum()) < 1e-12


class TestQuantilesFree:
    def test_cumsum_of_ones(self):
        np.testing.assert_array_equal(quantiles_free(np.zeros(3)), [1.0, 2.0, 3.0])

    def test_direct(self):
        np.testing.assert_allclose(quantiles_free(np.log([2.0, 2.0])), [2.0, 4.0])

    def test_strictly_increasing_with_exp_gaps(self, rng):
        R = rng.standard_normal(7)
        q = quantiles_free(R)
        assert (np.diff(q) > 0).all()
        np.testing.assert_allclose(np.diff(q), np.exp(R)[1:], atol=1e-12)

    def test_overflow_guard(self):
        with pytest.raises(OverflowError):
            quantiles_free(np.array([0.0, 800.0]))


class TestQuantilesPinned:
    def test_uniform_spacing(self):
        np.testing.assert_allclose(quantiles_pinned(np.zeros(2), 0.0, 1.0), [0.0, 0.5, 1.0])

    def test_endpoints_bit_equal(self, rng):
        s, t = 0.137, 9.224
        for _ in range(20):
            q = quantiles_pinned(rng.standard_normal(5), s, t)
            assert q[0] == s and q[-1] == t
            assert (np.diff(q) > 0).all()

    def test_known_values(self):
        np.testing.assert_allclose(
            quantiles_pinned(np.log([1.0, 3.0]), 0.0, 4.0), [0.0, 1.0, 4.0]
        )

    def test_invalid_range(self):
        with pytest.raises(InvalidRange):
            quantiles_pinned(np.zeros(2), 1.0, 1.0)

    def test_batched_rows(self, rng):
        R = rng.standard_normal((3, 4))
        s = np.array([0.0, -1.0, 2.0])
        t = np.array([1.0, 1.0, 5.0])
        Q = quantiles_pinned(R, s, t)
        np.testing.assert_array_equal(Q[:, 0], s)
        np.testing.assert_array_equal(Q[:, -1], t)
        for i in range(3):
            np.testing.assert_array_equal(Q[i], quantiles_pinned(R[i], s[i], t[i]))


class TestVjps:
    def test_zero_cotangent(self, rng):
        R = rng.standard_normal(5)
        w = weights_from_precursor(R)
        assert not vjp_weights(np.zeros(5), w).any()
        assert not vjp_quantiles_free(np.zeros(5), R).any()
        assert not vjp_quantiles_pinned(np.zeros(6), R, 0.0, 1.0).any()
        assert not vjp_factors(np.zeros(5), np.exp(R)).any()

    def test_finite_difference_sweep(self):
        worst = check_param_vjps(seed=0, trials=200)
        assert max(worst.values()) < 1e-5, worst


def test_factor_precursor_init_scale(rng):
    log_u, log_v = init_factor_precursors(400, 30, 400, rng)
    # exp of the precursors matches the scale of uniform draws on [0, 1)
    assert abs(np.exp(log_u).mean() - 0.5) < 0.05
    assert abs(np.exp(log_v).mean() - 0.5) < 0.05
    assert (np.exp(log_u) > 0).all()
