import numpy as np
import scipy.sparse as sp

from utils.linear_solvers import conjugate_gradient, least_squares, min_norm_solve


def _random_sparse(rows, cols, seed):
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))
    return sp.csr_matrix(dense), rng


def test_least_squares_matches_lstsq():
    A, rng = _random_sparse(40, 12, 0)
    b = rng.standard_normal(40) + 0j
    expected = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
    for direct in (True, False):
        result = least_squares(A, b, direct=direct)
        assert np.allclose(result.x, expected, atol=1e-8)


def test_min_norm_direct_and_lsqr_agree_with_pseudoinverse():
    A, rng = _random_sparse(10, 30, 1)
    b = rng.standard_normal(10) + 1j * rng.standard_normal(10)
    expected = np.linalg.pinv(A.toarray()) @ b
    direct = min_norm_solve(A, b, direct=True)
    iterative = min_norm_solve(A, b)
    assert direct.method == "splu"
    assert np.allclose(direct.x, expected, atol=1e-10)
    assert np.allclose(iterative.x, expected, atol=1e-7)


def test_min_norm_zero_rhs_is_zero():
    A, _ = _random_sparse(5, 9, 2)
    result = min_norm_solve(A, np.zeros(5))
    assert not np.any(result.x)
    assert result.iterations == 0


def test_conjugate_gradient_on_spd_system():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((20, 20))
    A = M @ M.T + 20 * np.eye(20)
    b = rng.standard_normal(20)
    result = conjugate_gradient(lambda x: A @ x, b, tol=1e-12)
    assert np.allclose(result.x, np.linalg.solve(A, b), atol=1e-8)
    assert result.residual < 1e-10
