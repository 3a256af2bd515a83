import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rlsde.errors import NotHurwitzError, NotPsdError
from rlsde.linalg import (
    as_psd,
    eigh,
    eigvalsh,
    is_hurwitz,
    log_norm,
    matrix_exp,
    principal_sqrt,
    solve_lyapunov,
    spectral_norm,
    sym_part,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def square(max_dim=6):
    return st.integers(1, max_dim).flatmap(lambda r: arrays(np.float64, (r, r), elements=finite))


# ---------------------------------------------------------------- examples


def test_sym_part_examples():
    S = np.array([[2.0, 1.0], [1.0, 3.0]])
    np.testing.assert_array_equal(sym_part(S), S)
    np.testing.assert_array_equal(sym_part([[0.0, 3.0], [-3.0, 0.0]]), np.zeros((2, 2)))
    np.testing.assert_array_equal(sym_part([[1.0, 2.0], [0.0, 1.0]]), [[1.0, 1.0], [1.0, 1.0]])


def test_spectral_norm_examples():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm(np.diag([3.0, -5.0])) == pytest.approx(5.0, rel=1e-12)
    assert spectral_norm([[0.0, 2.0], [0.0, 0.0]]) == pytest.approx(2.0, rel=1e-12)


def test_log_norm_examples():
    assert log_norm(-np.eye(2)) == pytest.approx(-1.0, rel=1e-12)
    assert log_norm([[0.0, 3.0], [-3.0, 0.0]]) == pytest.approx(0.0, abs=1e-14)
    assert log_norm([[1.0, 2.0], [0.0, 1.0]]) == pytest.approx(2.0, rel=1e-12)


def test_principal_sqrt_examples():
    np.testing.assert_allclose(principal_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(principal_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    S = principal_sqrt([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(np.linalg.eigvalsh(S), [1.0, np.sqrt(3.0)], rtol=1e-12)
    np.testing.assert_allclose(S, scipy.linalg.sqrtm([[2.0, 1.0], [1.0, 2.0]]).real, atol=1e-12)


def test_principal_sqrt_rejects_indefinite():
    with pytest.raises(NotPsdError):
        principal_sqrt(np.diag([1.0, -1e-3]))


def test_as_psd_rejects_asymmetric():
    with pytest.raises(NotPsdError):
        as_psd([[1.0, 0.5], [0.0, 1.0]])


def test_matrix_exp_examples():
    A = np.array([[0.3, -2.0], [1.0, 4.0]])
    np.testing.assert_array_equal(matrix_exp(A, 0.0), np.eye(2))
    np.testing.assert_allclose(matrix_exp(np.diag([-1.0, -2.0]), 1.0), np.diag(np.exp([-1.0, -2.0])), rtol=1e-13)
    np.testing.assert_allclose(matrix_exp([[0.0, 1.0], [0.0, 0.0]], 1.0), [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)


def test_solve_lyapunov_examples():
    np.testing.assert_allclose(solve_lyapunov(-np.eye(2), 2 * np.eye(2)), np.eye(2), atol=1e-14)
    np.testing.assert_allclose(solve_lyapunov([[-1.0]], [[2.0]]), [[1.0]], atol=1e-14)
    with pytest.raises(NotHurwitzError):
        solve_lyapunov([[0.0, 1.0], [-1.0, 0.0]], np.eye(2))


def test_solve_lyapunov_residual_random():
    g = np.random.default_rng(3)
    for _ in range(20):
        r = int(g.integers(1, 7))
        A = g.normal(size=(r, r)) - (r + 1.0) * np.eye(r)
        assert is_hurwitz(A)
        L = g.normal(size=(r, r))
        B = L @ L.T
        P = solve_lyapunov(A, B)
        res = A @ P + P @ A.T + B
        assert np.max(np.abs(res)) <= 1e-9 * (1 + np.linalg.norm(B, 2))


# ---------------------------------------------------------------- oracles


def test_jacobi_matches_lapack_batched():
    g = np.random.default_rng(0)
    X = g.normal(size=(200, 7, 7))
    S = sym_part(X)
    np.testing.assert_allclose(eigvalsh(S), np.linalg.eigvalsh(S), atol=1e-12)
    w, V = eigh(S)
    np.testing.assert_allclose(w, eigvalsh(S), atol=1e-12)
    np.testing.assert_allclose(V @ (w[..., None] * np.swapaxes(V, -1, -2)), S, atol=1e-12)
    np.testing.assert_allclose(np.swapaxes(V, -1, -2) @ V, np.broadcast_to(np.eye(7), V.shape), atol=1e-12)


def test_batch_results_do_not_depend_on_batch_company():
    g = np.random.default_rng(1)
    X = g.normal(size=(50, 4, 4))
    full = spectral_norm(X)
    for i in (0, 17, 49):
        assert spectral_norm(X[i]) == full[i]


def test_spectral_norm_extreme_scales():
    A = np.array([[1e200, 3e199], [0.0, 2e199]])
    assert spectral_norm(A) == pytest.approx(np.linalg.norm(A / 1e200, 2) * 1e200, rel=1e-10)
    tiny = np.array([[1e-200, 0.0], [0.0, 3e-200]])
    assert spectral_norm(tiny) == pytest.approx(3e-200, rel=1e-10)


def test_matrix_exp_matches_scipy_random():
    g = np.random.default_rng(2)
    for _ in range(100):
        r = int(g.integers(1, 9))
        A = g.normal(size=(r, r))
        A *= 5.0 / max(np.linalg.norm(A, 2), 1e-12) * g.uniform()
        t = float(g.uniform(0, 5))
        ref = scipy.linalg.expm(A * t)
        assert np.linalg.norm(matrix_exp(A, t) - ref, 2) <= 1e-10 * np.linalg.norm(ref, 2)


# ---------------------------------------------------------------- properties


@settings(max_examples=150, deadline=None)
@given(square())
def test_log_norm_below_spectral_norm(A):
    assert log_norm(A) <= spectral_norm(A) * (1 + 1e-12) + 1e-12


@settings(max_examples=150, deadline=None)
@given(square(), st.floats(-50, 50))
def test_log_norm_shift(A, c):
    r = A.shape[0]
    scale = 1.0 + np.max(np.abs(A)) + abs(c)
    assert log_norm(A + c * np.eye(r)) == pytest.approx(log_norm(A) + c, abs=1e-11 * scale)


@settings(max_examples=100, deadline=None)
@given(square(), st.integers(0, 2**32 - 1))
def test_rayleigh_quotient_below_log_norm(A, seed):
    r = A.shape[0]
    x = np.random.default_rng(seed).normal(size=(100, r))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    q = np.einsum("ki,ij,kj->k", x, sym_part(A), x)
    assert np.all(q <= log_norm(A) + 1e-9)


@settings(max_examples=100, deadline=None)
@given(square(5))
def test_principal_sqrt_squares_back(X):
    B = X @ X.T
    S = principal_sqrt(B)
    np.testing.assert_array_equal(S, S.T)
    assert np.linalg.norm(S @ S - B, 2) <= 1e-10 * (1 + np.linalg.norm(B, 2))
    assert np.min(np.linalg.eigvalsh(S)) >= -1e-10 * (1 + np.linalg.norm(B, 2))


@settings(max_examples=100, deadline=None)
@given(square(5), st.floats(0, 2), st.floats(0, 2))
def test_matrix_exp_semigroup(X, s, t):
    n = np.linalg.norm(X, 2)
    A = X * (5.0 / n) if n > 5 else X
    lhs = matrix_exp(A, s) @ matrix_exp(A, t)
    rhs = matrix_exp(A, s + t)
    assert np.linalg.norm(lhs - rhs, 2) <= 1e-8 * max(1.0, np.linalg.norm(rhs, 2))


@settings(max_examples=100, deadline=None)
@given(square())
def test_spectral_norm_matches_svd(A):
    assert spectral_norm(A) == pytest.approx(np.linalg.svd(A, compute_uv=False)[0], rel=1e-10, abs=1e-300)
