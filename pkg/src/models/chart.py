"""
Chart data models: simple surfaces, product charts, boundary regions
and geodesic traces.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from utils import expressions
from utils.stencils import trapezoid_weights


@dataclass(frozen=True, eq=False)
class SimpleSurface:
    """
    A simple surface in polar normal coordinates around an external point p.

    Attributes:
        kind: Preset name ('flat_disc', 'spherical_cap', 'perturbed_flat', 'planar')
        metric_expr: Expression for m(r, theta), the theta-theta metric component
        periodic: Whether theta is a full circle
        r_max: Exit radius, a constant or a callable of theta
        center: Label of the external point p
        params: Preset parameters (e.g. delta for perturbed_flat)
    """
    kind: str
    metric_expr: str
    periodic: bool = True
    r_max: object = 1.0
    center: str = "p"
    params: Dict = field(default_factory=dict)

    def metric_complex(self, r, theta) -> np.ndarray:
        """m(r, theta) evaluated with complex arguments allowed (for complex-step derivatives)."""
        r = np.asarray(r)
        theta = np.asarray(theta)
        return expressions.evaluate(self.metric_expr, {"r": r, "theta": theta,
                                                        "x1": np.zeros_like(r, dtype=float)})

    def metric(self, r, theta) -> np.ndarray:
        """Real metric component m(r, theta)."""
        return self.metric_complex(np.asarray(r, dtype=float), np.asarray(theta, dtype=float)).real

    def exit_radius(self, theta: float) -> float:
        """Boundary exit radius r_max(theta)."""
        return float(self.r_max(theta)) if callable(self.r_max) else float(self.r_max)

    def to_spec(self) -> Dict:
        return {"kind": self.kind, "metric": self.metric_expr, "periodic": self.periodic,
                "params": self.params}


@dataclass(frozen=True)
class CartesianEmbedding:
    """Identity map (x1, r, theta) -> (x, y, z) for slab charts."""

    def to_physical(self, x1, r, theta):
        return np.asarray(x1, dtype=float), np.asarray(r, dtype=float), np.asarray(theta, dtype=float)

    def weight_gradient(self, x, y, z):
        """Physical gradient of phi = x1."""
        return np.ones_like(x), np.zeros_like(x), np.zeros_like(x)


@dataclass(frozen=True)
class PolarEmbedding:
    """Flat polar coordinates around `center` in the (x, y) plane; x1 is the z axis."""
    center: Tuple[float, float] = (0.0, 0.0)

    def to_physical(self, x1, r, theta):
        x = self.center[0] + r * np.cos(theta)
        y = self.center[1] + r * np.sin(theta)
        return x, y, np.asarray(x1, dtype=float) * np.ones_like(x)

    def weight_gradient(self, x, y, z):
        return np.zeros_like(x), np.zeros_like(x), np.ones_like(x)


@dataclass(frozen=True)
class LogPolarEmbedding:
    """
    x = exp(orientation * y1) * S(r, theta) with S a point of the unit sphere.

    S(r, theta) = cos(r) p + sin(r) (cos(theta) a + sin(theta) b) is the
    polar normal parametrization of the sphere around the unit vector p.
    """
    pole: Tuple[float, float, float]
    a: Tuple[float, float, float]
    b: Tuple[float, float, float]
    orientation: int = 1

    def to_physical(self, y1, r, theta):
        p, a, b = (np.asarray(v, dtype=float) for v in (self.pole, self.a, self.b))
        scale = np.exp(self.orientation * np.asarray(y1, dtype=float))
        sx = np.cos(r) * p[0] + np.sin(r) * (np.cos(theta) * a[0] + np.sin(theta) * b[0])
        sy = np.cos(r) * p[1] + np.sin(r) * (np.cos(theta) * a[1] + np.sin(theta) * b[1])
        sz = np.cos(r) * p[2] + np.sin(r) * (np.cos(theta) * a[2] + np.sin(theta) * b[2])
        return scale * sx, scale * sy, scale * sz

    def weight_gradient(self, x, y, z):
        """Physical gradient of phi = y1 = orientation * log|x|."""
        norm2 = x**2 + y**2 + z**2
        return (self.orientation * x / norm2, self.orientation * y / norm2,
                self.orientation * z / norm2)


@dataclass(frozen=True)
class Face:
    """
    One face of the coordinate box.

    Attributes:
        axis: Normal axis (0 = x1, 1 = r, 2 = theta)
        side: 0 for the minimum face, -1 for the maximum face
    """
    axis: int
    side: int

    @property
    def name(self) -> str:
        return f"{('x1', 'r', 'theta')[self.axis]}_{'min' if self.side == 0 else 'max'}"

    @property
    def sign(self) -> float:
        """Outward normal is sign * e_axis."""
        return -1.0 if self.side == 0 else 1.0

    @property
    def tangent_axes(self) -> Tuple[int, int]:
        return tuple(a for a in range(3) if a != self.axis)

    def index(self) -> tuple:
        """Slice selecting this face from a grid array."""
        idx = [slice(None)] * 3
        idx[self.axis] = self.side
        return tuple(idx)


@dataclass(frozen=True, eq=False)
class ProductChart:
    """
    Product chart (x1, r, theta) with metric c (dx1^2 + dr^2 + m dtheta^2).

    Attributes:
        surface: Transversal simple surface
        x1_range: (min, max) of x1, endpoints included
        r_range: (min, max) of r, endpoints included; r_min > 0
        theta_range: None for periodic theta, else a sector (min, max)
        shape: Node counts (N1, Nr, Ntheta)
        conformal: Conformal factor on the grid, None meaning c = 1
        embedding: Map to physical coordinates, used by materials and level sets
    """
    surface: SimpleSurface
    x1_range: Tuple[float, float]
    r_range: Tuple[float, float]
    shape: Tuple[int, int, int]
    theta_range: Optional[Tuple[float, float]] = None
    conformal: Optional[np.ndarray] = None
    embedding: object = field(default_factory=PolarEmbedding)
    cache: Dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def periodic(self) -> bool:
        return self.theta_range is None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def axes(self) -> List[np.ndarray]:
        n1, nr, nt = self.shape
        x1 = np.linspace(self.x1_range[0], self.x1_range[1], n1)
        r = np.linspace(self.r_range[0], self.r_range[1], nr)
        if self.periodic:
            theta = 2.0 * np.pi * np.arange(nt) / nt
        else:
            theta = np.linspace(self.theta_range[0], self.theta_range[1], nt)
        return [x1, r, theta]

    @property
    def spacings(self) -> Tuple[float, float, float]:
        return tuple(float(ax[1] - ax[0]) for ax in self.axes)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if "mesh" not in self.cache:
            self.cache["mesh"] = np.meshgrid(*self.axes, indexing="ij")
        return self.cache["mesh"]

    @property
    def m(self) -> np.ndarray:
        """Metric component m on the grid, shape (N1, Nr, Ntheta)."""
        if "m" not in self.cache:
            _, r, theta = self.mesh()
            m = self.surface.metric(r, theta)
            self.cache["m"] = np.broadcast_to(m, self.shape).copy()
        return self.cache["m"]

    @property
    def s(self) -> np.ndarray:
        """Length of d-theta, sqrt(m)."""
        return np.sqrt(self.m)

    @property
    def c(self) -> np.ndarray:
        if self.conformal is None:
            return np.ones(self.shape)
        return np.broadcast_to(np.asarray(self.conformal, dtype=float), self.shape)

    @property
    def is_conformally_flat(self) -> bool:
        return self.conformal is None or bool(np.all(np.asarray(self.conformal) == 1.0))

    def quadrature_weights(self) -> np.ndarray:
        """Trapezoid weights times c^{3/2} sqrt(m): the volume element on the grid."""
        w1, wr, wt = (trapezoid_weights(n, h, periodic=(a == 2 and self.periodic))
                      for a, (n, h) in enumerate(zip(self.shape, self.spacings)))
        base = w1[:, None, None] * wr[None, :, None] * wt[None, None, :]
        return base * self.s * self.c**1.5

    def faces(self) -> List[Face]:
        axes = (0, 1) if self.periodic else (0, 1, 2)
        return [Face(a, side) for a in axes for side in (0, -1)]

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for face in self.faces():
            mask[face.index()] = True
        return mask

    def physical_coordinates(self) -> Dict[str, np.ndarray]:
        """Coordinates available to material expressions on this chart."""
        x1, r, theta = self.mesh()
        x, y, z = self.embedding.to_physical(x1, r, theta)
        return {"x1": x1, "r": r, "theta": theta, "x": x, "y": y, "z": z}

    def with_conformal(self, c: Optional[np.ndarray]) -> "ProductChart":
        return replace(self, conformal=c, cache={})

    def to_spec(self) -> Dict:
        spec = {
            "surface": self.surface.to_spec(),
            "x1_range": list(self.x1_range),
            "r_range": list(self.r_range),
            "theta_range": list(self.theta_range) if self.theta_range else None,
            "shape": list(self.shape),
            "embedding": type(self.embedding).__name__,
        }
        if self.conformal is not None:
            spec["conformal_sha256"] = hashlib.sha256(
                np.ascontiguousarray(self.c, dtype="<f8").tobytes()).hexdigest()
        return spec

    @property
    def chart_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_spec(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(eq=False)
class BoundaryRegion:
    """
    A set of boundary samples with their outward unit normals.

    Attributes:
        name: Region label ('F_phi', 'F_tilde', 'Gamma', ...)
        mask: Boolean field on the grid, True only at member boundary samples
        normal: Unit normal 1-form, shape (3, N1, Nr, Ntheta), orthonormal frame
            for box domains and physical components for level-set domains
        frame: 'orthonormal' or 'physical'
    """
    name: str
    mask: np.ndarray
    normal: np.ndarray
    frame: str = "orthonormal"

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def complement(self, boundary: np.ndarray, name: Optional[str] = None) -> "BoundaryRegion":
        return BoundaryRegion(name or f"{self.name}_c", boundary & ~self.mask, self.normal, self.frame)


@dataclass(frozen=True)
class LevelSetDomain:
    """
    Domain {rho <= 0} in physical coordinates with an analytic gradient of rho.

    Boundary samples are grid points inside the domain with a grid
    neighbour outside it.
    """
    rho: Callable
    gradient: Callable


@dataclass
class Geodesic:
    """
    Radial geodesic trace r -> (r, theta0) of a simple surface.

    Attributes:
        r: Sample radii, equally spaced in arclength
        theta0: Launch angle
        arclength: Arclength parameter of each sample
        step: Arclength step
    """
    r: np.ndarray
    theta0: float
    arclength: np.ndarray
    step: float

    def to_rows(self) -> List[Dict]:
        return [{"r": float(r), "theta": self.theta0, "x": float(r * np.cos(self.theta0)),
                 "y": float(r * np.sin(self.theta0))} for r in self.r]
