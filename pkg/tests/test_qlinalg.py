import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qretrodict import qlinalg as ql
from qretrodict.errors import DimensionError, NonHermitianError


def seeds():
    return st.integers(0, 2**32 - 1)


def test_identity_tensor_identity():
    assert np.array_equal(ql.tensor_product(np.eye(2), np.eye(2)), np.eye(4))


def test_projector_product_is_single_diagonal_entry():
    out = ql.tensor_product(ql.projector(ql.ket(0, 2)), ql.projector(ql.ket(1, 2)))
    expected = np.zeros((4, 4))
    expected[1, 1] = 1.0
    assert np.array_equal(out, expected)


def test_sigma_x_pair_is_involution():
    xx = ql.tensor_product(ql.SIGMA_X, ql.SIGMA_X)
    assert np.array_equal(xx @ xx, np.eye(4))


@given(seeds())
@settings(max_examples=30, deadline=None)
def test_tensor_product_associative_and_mixed_product(seed):
    rng = np.random.default_rng(seed)
    a, b, c, d = (ql.random_operator(n, rng) for n in (2, 3, 2, 3))
    e = ql.random_operator(2, rng)
    np.testing.assert_allclose(ql.tensor_product(ql.tensor_product(a, b), e),
                               ql.tensor_product(a, ql.tensor_product(b, e)), rtol=1e-15)
    np.testing.assert_allclose(ql.tensor_product(a, b) @ ql.tensor_product(c, d),
                               ql.tensor_product(a @ c, b @ d), atol=1e-12)


def test_partial_trace_examples():
    rng = np.random.default_rng(0)
    rho, sigma = ql.random_density(2, rng), ql.random_density(3, rng)
    np.testing.assert_allclose(ql.partial_trace(np.kron(rho, sigma), (2, 3), [0]), rho, atol=1e-14)
    np.testing.assert_allclose(ql.partial_trace(np.kron(rho, sigma), (2, 3), [1]), sigma,
                               atol=1e-14)
    np.testing.assert_array_equal(ql.partial_trace(np.eye(4), (2, 2), [0]), 2 * np.eye(2))
    bell = ql.projector(np.array([1, 0, 0, 1]) / np.sqrt(2))
    np.testing.assert_allclose(ql.partial_trace(bell, (2, 2), [0]), np.eye(2) / 2, atol=1e-15)


@given(seeds(), st.sampled_from([(2, 2), (3, 3), (2, 3), (3, 2)]))
@settings(max_examples=40, deadline=None)
def test_partial_trace_of_product_and_trace_preservation(seed, dims):
    rng = np.random.default_rng(seed)
    a, b = ql.random_operator(dims[0], rng), ql.random_operator(dims[1], rng)
    np.testing.assert_allclose(ql.partial_trace(np.kron(a, b), dims, [0]), a * np.trace(b),
                               atol=1e-12)
    x = ql.random_hermitian(dims[0] * dims[1], rng)
    for keep in ([0], [1], [0, 1]):
        assert abs(np.trace(ql.partial_trace(x, dims, keep)) - np.trace(x)) < 1e-12


def test_partial_trace_three_factors_matches_explicit_sum():
    rng = np.random.default_rng(1)
    dims = (2, 3, 2)
    x = ql.random_operator(12, rng)
    t = x.reshape(dims + dims)
    expected = np.einsum("abcdbf->acdf", t).reshape(4, 4)
    np.testing.assert_allclose(ql.partial_trace(x, dims, [0, 2]), expected, atol=1e-13)


def test_partial_trace_rejects_bad_factorization():
    with pytest.raises(DimensionError):
        ql.partial_trace(np.eye(4), (2, 3), [0])
    with pytest.raises(DimensionError):
        ql.partial_trace(np.eye(4), (2, 2), [2])
    with pytest.raises(DimensionError):
        ql.partial_trace(np.ones((2, 3)), (2,), [0])


def test_check_psd_examples():
    assert ql.check_psd(np.eye(2), 1e-12) == (True, 1.0)
    ok, lam = ql.check_psd(np.diag([1.0, -1e-6]), 1e-12)
    assert not ok and lam == pytest.approx(-1e-6)
    ok, lam = ql.check_psd(ql.SIGMA_X, 1e-12)
    assert not ok and lam == pytest.approx(-1.0)


def test_check_psd_rejects_non_hermitian():
    with pytest.raises(NonHermitianError):
        ql.check_psd(np.array([[0, 1], [0, 0]]), 1e-12)


def test_embed_operator_matches_kron_and_permutation():
    rng = np.random.default_rng(2)
    a, b = ql.random_operator(2, rng), ql.random_operator(3, rng)
    dims = (2, 3, 2)
    np.testing.assert_allclose(ql.embed_operator(a, dims, [0]),
                               ql.tensor_product(a, np.eye(3), np.eye(2)), atol=1e-15)
    np.testing.assert_allclose(ql.embed_operator(a, dims, [2]),
                               ql.tensor_product(np.eye(2), np.eye(3), a), atol=1e-15)
    # targets listed out of order: a acts on factor 1, b on factor 0
    np.testing.assert_allclose(ql.embed_operator(np.kron(a, b), (3, 2), [1, 0]), np.kron(b, a),
                               atol=1e-15)
    with pytest.raises(DimensionError):
        ql.embed_operator(a, dims, [0, 0])


def test_apply_operator_agrees_with_embedded_matrix():
    rng = np.random.default_rng(3)
    dims = (2, 3, 2)
    op = ql.random_operator(4, rng)
    kets = rng.normal(size=(5, 12)) + 1j * rng.normal(size=(5, 12))
    for targets in ([0, 2], [2, 0]):
        full = ql.embed_operator(op, dims, targets)
        np.testing.assert_allclose(ql.apply_operator(op, kets, dims, targets), kets @ full.T,
                                   atol=1e-12)


def test_trace_distance_and_unitarity_defect():
    zero, one = ql.projector(ql.ket(0, 2)), ql.projector(ql.ket(1, 2))
    assert ql.trace_distance(zero, one) == pytest.approx(1.0)
    assert ql.trace_distance(zero, zero) == 0.0
    stack = ql.trace_distance(np.array([zero, zero]), np.array([one, np.eye(2) / 2]))
    np.testing.assert_allclose(stack, [1.0, 0.5])
    assert ql.unitarity_defect(ql.CNOT) == 0.0
    assert ql.unitarity_defect(2 * np.kron(ql.SIGMA_X, np.eye(2))) == pytest.approx(3.0)


@given(seeds(), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_random_generators_produce_valid_objects(seed, dim):
    rng = np.random.default_rng(seed)
    rho = ql.random_density(dim, rng)
    assert abs(np.trace(rho) - 1) < 1e-12
    assert ql.check_psd(rho, 1e-12)[0]
    assert ql.unitarity_defect(ql.random_unitary(dim, rng)) < 1e-12
    assert ql.is_hermitian(ql.random_hermitian(dim, rng))


def test_as_cmatrix_validates():
    with pytest.raises(DimensionError):
        ql.as_cmatrix(np.ones(3))
    with pytest.raises(ValueError):
        ql.as_cmatrix(np.array([[np.nan]]))
    assert ql.as_cmatrix([[1, 2], [3, 4]]).dtype == complex
