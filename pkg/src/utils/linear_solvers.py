"""
Sparse linear-algebra helpers shared by the forward, CGO and inversion code.

Direct factorizations are tried first at desk scale; Krylov solvers
(LSQR, CG) are the fallback and the choice for minimum-norm problems.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import CG_MAXITER, CG_TOL, LSQR_ATOL, LSQR_BTOL, LSQR_ITER_LIMIT
from utils.errors import NonConvergence

logger = logging.getLogger(__name__)


@dataclass
class LinearSolveResult:
    """Solution vector plus diagnostics of one sparse solve."""
    x: np.ndarray
    residual: float
    iterations: int
    method: str


def least_squares(A: sp.spmatrix, b: np.ndarray, direct: bool = True,
                  atol: float = LSQR_ATOL, btol: float = LSQR_BTOL,
                  iter_lim: int = LSQR_ITER_LIMIT) -> LinearSolveResult:
    """
    Solve min ||Ax - b|| for an overdetermined full-column-rank system.

    Normal equations are factorized with SuperLU when `direct` is set;
    on a singular factorization the solve falls back to LSQR.

    Raises:
        NonConvergence: if LSQR hits its iteration limit
    """
    A = sp.csc_matrix(A)
    if direct:
        try:
            normal = (A.conj().T @ A).tocsc()
            lu = spla.splu(normal)
            x = lu.solve(A.conj().T @ b)
            if np.all(np.isfinite(x)):
                return LinearSolveResult(x, float(np.linalg.norm(A @ x - b)), 1, "splu")
            logger.warning("⚠️ Normal-equation factorization produced non-finite values, using LSQR")
        except RuntimeError as e:
            logger.warning(f"⚠️ Direct factorization failed ({e}), using LSQR")

    return min_norm_solve(A, b, atol=atol, btol=btol, iter_lim=iter_lim)


def min_norm_solve(A: sp.spmatrix, b: np.ndarray, atol: float = LSQR_ATOL,
                   btol: float = LSQR_BTOL, iter_lim: int = LSQR_ITER_LIMIT,
                   direct: bool = False) -> LinearSolveResult:
    """
    Minimum-norm solution of an underdetermined system.

    With `direct`, x = A^H (A A^H)^{-1} b through SuperLU (full row rank
    required); otherwise, or when the factorization fails, LSQR from zero.

    Raises:
        NonConvergence: if the iteration limit is reached
    """
    if not np.any(b):
        return LinearSolveResult(np.zeros(A.shape[1], dtype=complex), 0.0, 0, "lsqr")

    if direct:
        A = sp.csr_matrix(A)
        try:
            gram = (A @ A.conj().T).tocsc()
            x = A.conj().T @ spla.splu(gram).solve(np.asarray(b, dtype=complex))
            residual = float(np.linalg.norm(A @ x - b))
            if np.all(np.isfinite(x)) and residual <= 1e-8 * np.linalg.norm(b):
                return LinearSolveResult(x, residual, 1, "splu")
            logger.warning(f"⚠️ Row-space factorization left residual {residual:.3e}, using LSQR")
        except RuntimeError as e:
            logger.warning(f"⚠️ Row-space factorization failed ({e}), using LSQR")

    result = spla.lsqr(A, b, atol=atol, btol=btol, iter_lim=iter_lim)
    x, istop, itn = result[0], result[1], result[2]
    residual = float(np.linalg.norm(A @ x - b))
    if istop == 7:
        raise NonConvergence(f"LSQR reached {itn} iterations, residual {residual:.3e}")
    logger.debug(f"LSQR stopped with code {istop} after {itn} iterations")
    return LinearSolveResult(x, residual, int(itn), "lsqr")


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
                       tol: float = CG_TOL, maxiter: int = CG_MAXITER,
                       x0: Optional[np.ndarray] = None) -> LinearSolveResult:
    """
    CG for a Hermitian positive-definite operator given as a callable.

    Raises:
        NonConvergence: if scipy reports info > 0
    """
    n = rhs.shape[0]
    if not np.any(rhs):
        return LinearSolveResult(np.zeros(n, dtype=rhs.dtype), 0.0, 0, "cg")

    op = spla.LinearOperator((n, n), matvec=apply, dtype=rhs.dtype)
    iterations = {"n": 0}

    def _count(_):
        iterations["n"] += 1

    try:
        x, info = spla.cg(op, rhs, rtol=tol, maxiter=maxiter, x0=x0, callback=_count)
    except TypeError:
        # scipy < 1.12 names the relative tolerance `tol`
        x, info = spla.cg(op, rhs, tol=tol, maxiter=maxiter, x0=x0, callback=_count)

    residual = float(np.linalg.norm(apply(x) - rhs) / np.linalg.norm(rhs))
    if info > 0:
        raise NonConvergence(f"CG did not converge in {info} iterations (relative residual {residual:.3e})")
    return LinearSolveResult(x, residual, iterations["n"], "cg")
