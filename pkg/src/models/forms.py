"""
Graded differential forms on the product grid.

Component order follows the Dirac-system vector (Phi, *H | *Psi, E):

    0      0-form
    1..3   2-form  e12, e13, e23
    4      3-form  e123
    5..7   1-form  e1, e2, e3

where e1 = dx1, e2 = dr, e3 = sqrt(m) dtheta is the orthonormal coframe.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

# Basis multi-indices over the coframe axes, in storage order
BASIS: Tuple[Tuple[int, ...], ...] = ((), (0, 1), (0, 2), (1, 2), (0, 1, 2), (0,), (1,), (2,))
DEGREES = np.array([len(b) for b in BASIS])
EVEN = (0, 1, 2, 3)
ODD = (4, 5, 6, 7)
SCALAR, TWO_FORM, VOLUME, ONE_FORM = (0,), (1, 2, 3), (4,), (5, 6, 7)
N_COMPONENTS = 8


def component_index(indices: Tuple[int, ...]) -> int:
    """Storage slot of the basis element e_I for a sorted multi-index I."""
    return BASIS.index(tuple(indices))


@dataclass
class GradedForm:
    """
    Eight complex component fields sharing one chart grid.

    Attributes:
        data: Complex array of shape (8, N1, Nr, Ntheta)
    """
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 4 or self.data.shape[0] != N_COMPONENTS:
            raise ValueError(f"graded form needs shape (8, N1, Nr, Ntheta), got {self.data.shape}")

    @classmethod
    def zeros(cls, grid_shape) -> "GradedForm":
        return cls(np.zeros((N_COMPONENTS,) + tuple(grid_shape), dtype=complex))

    @classmethod
    def from_flat(cls, vector: np.ndarray, grid_shape) -> "GradedForm":
        return cls(np.asarray(vector).reshape((N_COMPONENTS,) + tuple(grid_shape)))

    @classmethod
    def scalar(cls, field: np.ndarray, slot: int = 0) -> "GradedForm":
        form = cls.zeros(np.shape(field))
        form.data[slot] = field
        return form

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def comp0(self) -> np.ndarray:
        return self.data[0]

    @property
    def comp2(self) -> np.ndarray:
        return self.data[1:4]

    @property
    def comp3(self) -> np.ndarray:
        return self.data[4]

    @property
    def comp1(self) -> np.ndarray:
        return self.data[5:8]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def degree_part(self, degree: int) -> "GradedForm":
        out = np.zeros_like(self.data)
        keep = DEGREES == degree
        out[keep] = self.data[keep]
        return GradedForm(out)

    def copy(self) -> "GradedForm":
        return GradedForm(self.data.copy())

    def __add__(self, other: "GradedForm") -> "GradedForm":
        return GradedForm(self.data + other.data)

    def __sub__(self, other: "GradedForm") -> "GradedForm":
        return GradedForm(self.data - other.data)

    def __mul__(self, scalar) -> "GradedForm":
        return GradedForm(self.data * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "GradedForm":
        return GradedForm(-self.data)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0


@dataclass
class BoundaryForm:
    """
    Tangential boundary values, one (8, n_a, n_b) array per box face.

    Components containing the face normal are zero by construction, so
    a boundary form only carries the pullback t of a graded form.

    Attributes:
        faces: Face name -> component array
    """
    faces: Dict[str, np.ndarray]

    def __add__(self, other: "BoundaryForm") -> "BoundaryForm":
        return BoundaryForm({k: v + other.faces[k] for k, v in self.faces.items()})

    def __sub__(self, other: "BoundaryForm") -> "BoundaryForm":
        return BoundaryForm({k: v - other.faces[k] for k, v in self.faces.items()})

    def __mul__(self, scalar) -> "BoundaryForm":
        return BoundaryForm({k: v * scalar for k, v in self.faces.items()})

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.faces.values() if v.size), default=0.0)

    def copy(self) -> "BoundaryForm":
        return BoundaryForm({k: v.copy() for k, v in self.faces.items()})
