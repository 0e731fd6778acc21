"""Kernel contracts, checked against independent oracles on every
available backend."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtexit import kernels
from vtexit.kernels import available_backends

from reference import gelu_scalar, matmul_triple_loop, softmax_row_mpmath

BACKENDS = sorted(available_backends().items())


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.mark.parametrize("name,be", BACKENDS)
class TestMatmul:
    def test_identity(self, name, be):
        m = rng(1).standard_normal((3, 5))
        assert np.array_equal(be.matmul(np.eye(3), m), m)

    def test_hand_2x2(self, name, be):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        assert be.matmul(a, b).tolist() == [[2.0], [4.0]]

    def test_against_triple_loop(self, name, be):
        a = rng(2).standard_normal((5, 7))
        b = rng(3).standard_normal((7, 3))
        np.testing.assert_allclose(be.matmul(a, b), matmul_triple_loop(a, b),
                                   rtol=0, atol=1e-12)

    def test_dimension_mismatch_rejected(self, name, be):
        with pytest.raises(ValueError):
            be.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_nt_equals_transpose(self, name, be):
        a = rng(4).standard_normal((4, 6))
        b = rng(5).standard_normal((5, 6))
        np.testing.assert_allclose(be.matmul_nt(a, b), a @ b.T, atol=1e-12)
        with pytest.raises(ValueError):
            be.matmul_nt(np.zeros((2, 3)), np.zeros((5, 4)))


@pytest.mark.parametrize("name,be", BACKENDS)
class TestSoftmax:
    def test_symmetric(self, name, be):
        out = be.softmax_rows(np.array([[0.0, 0.0]]))
        assert out.tolist() == [[0.5, 0.5]]

    def test_large_magnitude_stable(self, name, be):
        out = be.softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_against_mpmath(self, name, be):
        row = rng(6).standard_normal(9) * 3
        np.testing.assert_allclose(be.softmax_rows(row[None, :])[0],
                                   softmax_row_mpmath(row), rtol=0, atol=1e-12)

    def test_minus_inf_keys_get_zero_mass(self, name, be):
        row = np.array([[0.3, float("-inf"), 1.2]])
        out = be.softmax_rows(row)
        assert out[0, 1] == 0.0
        assert out[0].sum() == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("name,be", BACKENDS)
class TestNormAndGelu:
    def test_layer_norm_constant_row_is_zero(self, name, be):
        m = np.full((2, 8), 3.7)
        out = be.layer_norm_rows(m, np.ones(8), np.zeros(8))
        assert np.array_equal(out, np.zeros((2, 8)))

    def test_layer_norm_standardizes(self, name, be):
        m = rng(7).standard_normal((4, 32)) * 5 + 2
        out = be.layer_norm_rows(m, np.ones(32), np.zeros(32))
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-3)

    def test_gelu_values(self, name, be):
        m = np.array([[0.0, 1.0, -2.5]])
        out = be.gelu_mat(m)
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(gelu_scalar(1.0), abs=1e-9)
        assert out[0, 2] == pytest.approx(gelu_scalar(-2.5), abs=1e-9)

    def test_gelu_grad_matches_finite_difference(self, name, be):
        xs = rng(8).standard_normal((1, 64)) * 2
        h = 1e-6
        fd = (be.gelu_mat(xs + h) - be.gelu_mat(xs - h)) / (2 * h)
        np.testing.assert_allclose(be.gelu_grad_mat(xs), fd, atol=1e-7)


def test_gelu_scalar_wrapper():
    assert kernels.gelu(0.0) == 0.0
    assert kernels.gelu(1.0) == pytest.approx(gelu_scalar(1.0), abs=1e-9)


def test_backends_agree():
    be = available_backends()
    if len(be) < 2:
        pytest.skip("compiled backend unavailable")
    a = rng(9).standard_normal((17, 23))
    b = rng(10).standard_normal((23, 11))
    np.testing.assert_allclose(be["python"].matmul(a, b), be["compiled"].matmul(a, b),
                               rtol=1e-13, atol=1e-13)
    m = rng(11).standard_normal((6, 40)) * 10
    np.testing.assert_allclose(be["python"].softmax_rows(m), be["compiled"].softmax_rows(m),
                               atol=1e-14)
    g, c = np.ones(40) * 1.3, np.full(40, -0.2)
    np.testing.assert_allclose(be["python"].layer_norm_rows(m, g, c),
                               be["compiled"].layer_norm_rows(m, g, c), atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=1, max_size=24))
def test_softmax_rows_sum_to_one(row):
    m = np.array([row], dtype=np.float64)
    s = kernels.softmax_rows(m).sum(axis=1)
    assert abs(s[0] - 1.0) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_matmul_associative(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((4, 5))
    b = r.standard_normal((5, 6))
    c = r.standard_normal((6, 3))
    left = kernels.matmul(kernels.matmul(a, b), c)
    right = kernels.matmul(a, kernels.matmul(b, c))
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)
