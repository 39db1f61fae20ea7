"""
Material and matrix-potential data models.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp

from models.forms import EVEN, N_COMPONENTS, GradedForm
from utils.errors import BranchCutCrossing, MaterialError


@dataclass(eq=False)
class MaterialPair:
    """
    Permittivity and permeability sampled on a chart grid.

    Attributes:
        eps: Complex permittivity, Re > 0
        mu: Complex permeability, Re > 0
        omega: Angular frequency (> 0)
        label: Free-form description (expression strings, file names)
    """
    eps: np.ndarray
    mu: np.ndarray
    omega: float
    label: str = ""

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=complex)
        self.mu = np.asarray(self.mu, dtype=complex)
        if self.omega <= 0:
            raise MaterialError(f"omega must be positive, got {self.omega}")
        if self.eps.shape != self.mu.shape:
            raise MaterialError(f"eps {self.eps.shape} and mu {self.mu.shape} grids differ")
        if np.any(self.eps.real <= 0) or np.any(self.mu.real <= 0):
            raise MaterialError("material parameters need Re(eps) > 0 and Re(mu) > 0")
        if not (np.all(np.isfinite(self.eps)) and np.all(np.isfinite(self.mu))):
            raise MaterialError("material parameters must be finite")

    @cached_property
    def alpha(self) -> np.ndarray:
        """Principal-branch log(eps), checked for branch-cut jumps."""
        return principal_log(self.eps, "eps")

    @cached_property
    def beta(self) -> np.ndarray:
        return principal_log(self.mu, "mu")

    @cached_property
    def kappa(self) -> np.ndarray:
        """omega (eps mu)^{1/2}, taken as omega exp((alpha + beta)/2)."""
        return self.omega * np.exp(0.5 * (self.alpha + self.beta))

    def with_fields(self, eps: np.ndarray, mu: np.ndarray) -> "MaterialPair":
        return MaterialPair(eps, mu, self.omega, self.label)

    def with_omega(self, omega: float) -> "MaterialPair":
        return MaterialPair(self.eps, self.mu, omega, self.label)


def principal_log(values: np.ndarray, name: str) -> np.ndarray:
    log = np.log(values)
    for axis in range(log.ndim):
        if log.shape[axis] < 2:
            continue
        jump = np.abs(np.diff(log.imag, axis=axis))
        if np.any(jump > np.pi):
            raise BranchCutCrossing(f"log({name}) jumps by {jump.max():.3f} along axis {axis}")
    return log


@dataclass(eq=False)
class MatrixPotential:
    """
    Pointwise 8x8 complex endomorphism field.

    Attributes:
        values: Array of shape (8, 8, N1, Nr, Ntheta)
        name: Label ('V', 'W', 'Q', ...)
    """
    values: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[:2] != (N_COMPONENTS, N_COMPONENTS):
            raise ValueError(f"matrix potential needs leading shape (8, 8), got {self.values.shape}")

    @property
    def grid_shape(self):
        return self.values.shape[2:]

    def apply(self, form: GradedForm) -> GradedForm:
        return GradedForm(np.einsum("ij...,j...->i...", self.values, form.data))

    def transpose(self) -> "MatrixPotential":
        return MatrixPotential(np.swapaxes(self.values, 0, 1), f"{self.name}^t")

    def conj(self) -> "MatrixPotential":
        return MatrixPotential(np.conj(self.values), f"{self.name}bar")

    def adjoint(self) -> "MatrixPotential":
        return MatrixPotential(np.conj(np.swapaxes(self.values, 0, 1)), f"{self.name}*")

    def __add__(self, other: "MatrixPotential") -> "MatrixPotential":
        return MatrixPotential(self.values + other.values)

    def __sub__(self, other: "MatrixPotential") -> "MatrixPotential":
        return MatrixPotential(self.values - other.values)

    def __neg__(self) -> "MatrixPotential":
        return MatrixPotential(-self.values, f"-{self.name}")

    def at(self, index) -> np.ndarray:
        """8x8 matrix at one grid index."""
        return self.values[(slice(None), slice(None)) + tuple(index)]

    def is_block_even_odd(self) -> bool:
        """True when the potential preserves the even/odd grading."""
        odd = [i for i in range(N_COMPONENTS) if i not in EVEN]
        return not (np.any(self.values[np.ix_(EVEN, odd)]) or np.any(self.values[np.ix_(odd, EVEN)]))

    def to_sparse(self) -> sp.csr_matrix:
        """Block-diagonal sparse matrix acting on flattened graded forms."""
        n = int(np.prod(self.grid_shape))
        rows = []
        for i in range(N_COMPONENTS):
            row = []
            for j in range(N_COMPONENTS):
                entry = self.values[i, j].reshape(-1)
                row.append(sp.diags(entry) if np.any(entry) else None)
            if all(b is None for b in row):
                row[i] = sp.csr_matrix((n, n))
            rows.append(row)
        for j in range(N_COMPONENTS):
            if all(rows[i][j] is None for i in range(N_COMPONENTS)):
                rows[j][j] = sp.csr_matrix((n, n))
        return sp.bmat(rows, format="csr")

    def to_json(self, index, path: Optional[Path] = None) -> Dict:
        """Per-point export: 8x8 complex matrix as [re, im] pairs."""
        mat = self.at(index)
        payload = {"name": self.name, "index": list(map(int, index)),
                   "matrix": [[[float(v.real), float(v.imag)] for v in row] for row in mat]}
        if path is not None:
            Path(path).write_text(json.dumps(payload, indent=2))
        return payload
