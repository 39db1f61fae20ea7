"""
One-dimensional finite-difference building blocks.

Three-dimensional operators are assembled from these with Kronecker
products over the (x1, r, theta) axes.
"""

import numpy as np
import scipy.sparse as sp


def first_difference(n: int, h: float, periodic: bool = False) -> sp.csr_matrix:
    """
    Second-order first-derivative matrix on n equispaced nodes.

    Interior rows are centred; non-periodic ends use one-sided
    second-order rows, periodic grids use the circulant centred stencil.

    Args:
        n: Number of nodes (>= 3)
        h: Node spacing
        periodic: Wrap around at the ends

    Returns:
        Sparse n x n matrix
    """
    if n < 3:
        raise ValueError(f"need at least 3 nodes for a difference stencil, got {n}")

    if periodic:
        rows = np.arange(n)
        data = np.concatenate([np.full(n, -0.5), np.full(n, 0.5)]) / h
        cols = np.concatenate([(rows - 1) % n, (rows + 1) % n])
        return sp.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(n, n))

    mat = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        mat[i, i - 1] = -0.5
        mat[i, i + 1] = 0.5
    mat[0, 0:3] = [-1.5, 2.0, -0.5]
    mat[n - 1, n - 3:n] = [0.5, -2.0, 1.5]
    return (mat / h).tocsr()


def trapezoid_weights(n: int, h: float, periodic: bool = False) -> np.ndarray:
    """Composite trapezoid weights; periodic grids get uniform weights."""
    w = np.full(n, h)
    if not periodic:
        w[0] *= 0.5
        w[-1] *= 0.5
    return w


def kron3(a: sp.spmatrix, b: sp.spmatrix, c: sp.spmatrix) -> sp.csr_matrix:
    """Kronecker product for row-major (x1, r, theta) flattening."""
    return sp.kron(sp.kron(a, b, format="csr"), c, format="csr")


def axis_operator(one_d: sp.spmatrix, axis: int, shape: tuple) -> sp.csr_matrix:
    """Lift a 1D operator acting along `axis` to the flattened 3D grid."""
    factors = [sp.identity(n, format="csr") for n in shape]
    factors[axis] = sp.csr_matrix(one_d)
    return kron3(*factors)


def apply_along_axis(one_d: sp.spmatrix, field: np.ndarray, axis: int) -> np.ndarray:
    """Apply a sparse 1D operator along one axis of an n-d array."""
    moved = np.moveaxis(field, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = (one_d @ flat).reshape(moved.shape)
    return np.moveaxis(out, 0, axis)
