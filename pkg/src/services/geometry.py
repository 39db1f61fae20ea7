"""
Geometry Service - charts, geodesics, front faces and conformal rescaling

Features:
- Product charts over the simple-surface presets in config
- Radial geodesic traces in polar normal coordinates
- Front face F_phi, its complement and enlargements F1, F~ on box
  and level-set domains
- Gamma = boundary minus closure(F1) with the sign check <dphi, nu> < 0
- Conformal rescaling and the log-polar chart of Euclidean domains
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from config import F1_ENLARGE_CELLS, FRONT_FACE_ENLARGE_CELLS, SURFACES
from models.chart import (BoundaryRegion, CartesianEmbedding, Geodesic, LevelSetDomain,
                          LogPolarEmbedding, PolarEmbedding, ProductChart, SimpleSurface)
from models.materials import MaterialPair
from utils.errors import (ConfigInvalid, DomainTouchesPole, GammaSignViolation, NonSimpleSurface,
                          NonpositiveConformalFactor, PreconditionError)

logger = logging.getLogger(__name__)


@dataclass
class FrontFace:
    """
    Front face of a domain and its derived boundary regions.

    Attributes:
        front: F_phi, samples with <dphi, nu> >= 0
        complement: boundary samples outside F_phi
        enlarged: F~, F_phi grown by the configured number of cells
        products: <dphi, nu> at every boundary sample (zero elsewhere)
    """
    front: BoundaryRegion
    complement: BoundaryRegion
    enlarged: BoundaryRegion
    products: np.ndarray


@dataclass
class BoundaryRegions:
    """The nested regions F_phi in F1 in F~ and Gamma = boundary minus closure(F1)."""
    front: FrontFace
    f1: BoundaryRegion
    gamma: BoundaryRegion
    boundary: np.ndarray


# ----------------------------------------------------------------------
# Surfaces and charts
# ----------------------------------------------------------------------

def build_surface(kind: str, r_max: float = 1.0, **params) -> SimpleSurface:
    """
    Create a preset surface.

    Raises:
        ConfigInvalid: for unknown kinds
    """
    if kind not in SURFACES:
        raise ConfigInvalid(f"unknown surface '{kind}', available: {', '.join(SURFACES)}")
    preset = dict(SURFACES[kind])
    merged = {k: v for k, v in preset.items() if k not in ("metric", "periodic")}
    merged.update(params)
    metric = preset["metric"].format(**merged)
    return SimpleSurface(kind=kind, metric_expr=metric, periodic=preset["periodic"],
                         r_max=r_max, params=merged)


def build_chart(spec: Dict) -> ProductChart:
    """
    Build a chart from a config block.

    Keys: surface (kind), params, x1_range, r_range, shape, optional
    theta_range, center (external point for polar charts) and conformal
    (an expression in the chart coordinates).

    A 'log_polar_ball' block {center, radius, orientation, margin} with a
    shape builds the log-polar chart of a Euclidean ball instead.
    """
    if "log_polar_ball" in spec:
        ball = spec["log_polar_ball"]
        try:
            chart, _ = log_polar_euclidean_chart(ball["center"], float(ball["radius"]), spec["shape"],
                                                 int(ball.get("orientation", -1)), float(ball.get("margin", 0.1)))
        except KeyError as e:
            raise ConfigInvalid(f"log_polar_ball spec is missing key {e}") from e
        return chart
    try:
        kind = spec.get("surface", "flat_disc")
        r_range = tuple(float(v) for v in spec["r_range"])
        surface = build_surface(kind, r_max=r_range[1], **spec.get("params", {}))
        theta_range = spec.get("theta_range")
        if theta_range is None and not surface.periodic:
            raise ConfigInvalid(f"surface '{kind}' needs an explicit theta_range")
        if kind == "planar":
            embedding = CartesianEmbedding()
        else:
            embedding = PolarEmbedding(tuple(spec.get("center", (0.0, 0.0))))
        chart = ProductChart(
            surface=surface,
            x1_range=tuple(float(v) for v in spec["x1_range"]),
            r_range=r_range,
            shape=tuple(int(n) for n in spec["shape"]),
            theta_range=tuple(theta_range) if theta_range is not None else None,
            embedding=embedding,
        )
    except KeyError as e:
        raise ConfigInvalid(f"chart spec is missing key {e}") from e

    if kind != "planar" and chart.r_range[0] <= 0:
        raise ConfigInvalid("polar charts need r_min > 0 (the center lies outside the domain)")
    if np.any(chart.m <= 0):
        raise NonSimpleSurface(f"metric of '{kind}' is not positive on the chart")

    if "conformal" in spec:
        from utils import expressions
        c = expressions.evaluate(spec["conformal"], chart.physical_coordinates()).real
        chart = chart.with_conformal(c)
    logger.info(f"Chart {chart.chart_hash}: {kind} {chart.shape}, x1 {chart.x1_range}, r {chart.r_range}")
    return chart


def resolvable_tau_window(chart: ProductChart, taus, bound: float) -> list:
    """Keep the tau values with tau * max(h1, hr) <= bound."""
    h = max(chart.spacings[0], chart.spacings[1])
    kept = [t for t in taus if abs(t) * h <= bound]
    dropped = [t for t in taus if t not in kept]
    if dropped:
        logger.warning(f"⚠️ Dropping tau values {dropped}: not resolved with h = {h:.4f}")
    return kept


# ----------------------------------------------------------------------
# Geodesics
# ----------------------------------------------------------------------

def geodesic_trace(surface: SimpleSurface, theta0: float, step: float,
                   h_r: Optional[float] = None, r_min: float = 0.0) -> Geodesic:
    """
    Trace the radial geodesic r -> (r, theta0) up to the exit radius.

    In polar normal coordinates r is arclength, so samples are placed at
    equal r steps; the last sample is within one step of r_max(theta0).

    Raises:
        PreconditionError: if step > h_r or theta0 is outside [0, 2 pi)
        NonSimpleSurface: if m <= 0 is met along the ray
    """
    if step <= 0 or (h_r is not None and step > h_r):
        raise PreconditionError(f"geodesic step {step} must be positive and <= h_r = {h_r}")
    if not 0.0 <= theta0 < 2.0 * np.pi:
        raise PreconditionError(f"theta0 = {theta0} outside [0, 2pi)")

    r_end = surface.exit_radius(theta0)
    count = int(np.floor((r_end - r_min) / step + 1e-12)) + 1
    r = r_min + step * np.arange(count)
    interior = r[r > 0]
    if interior.size and np.any(surface.metric(interior, np.full_like(interior, theta0)) <= 0):
        raise NonSimpleSurface(f"m <= 0 along the geodesic theta0 = {theta0:.4f}")
    return Geodesic(r=r, theta0=float(theta0), arclength=r - r_min, step=step)


# ----------------------------------------------------------------------
# Front faces and boundary regions
# ----------------------------------------------------------------------

def box_normals(chart: ProductChart) -> np.ndarray:
    """Unit outward normal (orthonormal frame) at box boundary samples; edges average faces."""
    normal = np.zeros((3,) + chart.shape)
    for face in chart.faces():
        normal[(face.axis,) + face.index()] += face.sign
    length = np.sqrt(np.sum(normal**2, axis=0))
    nonzero = length > 0
    normal[:, nonzero] /= length[nonzero]
    return normal


def _dilate(mask: np.ndarray, within: np.ndarray, cells: int, periodic: bool) -> np.ndarray:
    """Grow `mask` by `cells` grid steps (26-connectivity) inside `within`."""
    if cells <= 0 or not mask.any():
        return mask.copy()
    structure = np.ones((3, 3, 3), dtype=bool)
    if periodic:
        pad = ((0, 0), (0, 0), (cells, cells))
        grown = ndimage.binary_dilation(np.pad(mask, pad, mode="wrap"), structure=structure,
                                        iterations=cells, mask=np.pad(within, pad, mode="wrap"))
        return grown[:, :, cells:-cells]
    return ndimage.binary_dilation(mask, structure=structure, iterations=cells, mask=within)


def level_set_boundary(chart: ProductChart, domain: LevelSetDomain) -> Tuple[np.ndarray, np.ndarray]:
    """
    Boundary samples of {rho <= 0} on the chart grid and their unit normals.

    Returns:
        (mask, normal) with the normal in physical components
    """
    x, y, z = chart.embedding.to_physical(*chart.mesh())
    inside = domain.rho(x, y, z) <= 0
    outside_neighbour = np.zeros_like(inside)
    for axis in range(3):
        for shift in (-1, 1):
            if axis == 2 and chart.periodic:
                rolled = np.roll(inside, shift, axis=axis)
            else:
                rolled = np.roll(inside, shift, axis=axis)
                edge = [slice(None)] * 3
                edge[axis] = 0 if shift == 1 else -1
                rolled[tuple(edge)] = False
            outside_neighbour |= ~rolled
    mask = inside & outside_neighbour

    gx, gy, gz = domain.gradient(x, y, z)
    length = np.sqrt(gx**2 + gy**2 + gz**2)
    normal = np.zeros((3,) + chart.shape)
    safe = np.where(length > 0, length, 1.0)
    normal[0], normal[1], normal[2] = gx / safe, gy / safe, gz / safe
    normal[:, ~mask] = 0.0
    return mask, normal


def front_face(chart: ProductChart, domain: Optional[LevelSetDomain] = None,
               weight_gradient: Optional[Callable] = None,
               enlarge: int = FRONT_FACE_ENLARGE_CELLS) -> FrontFace:
    """
    Front face F_phi = {<dphi, nu> >= 0} of the chart box or of a level-set domain.

    Args:
        chart: Product chart; phi is its first coordinate
        domain: Optional level-set domain; None means the whole chart box
        weight_gradient: Physical gradient of an alternative weight (level sets only)
        enlarge: Cells by which F~ extends F_phi along the boundary

    Returns:
        FrontFace with F_phi, its complement, F~ and the products <dphi, nu>
    """
    if domain is None:
        boundary = chart.boundary_mask()
        normal = box_normals(chart)
        frame = "orthonormal"
        # dphi = dx1 has orthonormal components (1, 0, 0)
        products = np.where(boundary, normal[0], 0.0)
    else:
        boundary, normal = level_set_boundary(chart, domain)
        frame = "physical"
        x, y, z = chart.embedding.to_physical(*chart.mesh())
        grad = (weight_gradient or chart.embedding.weight_gradient)(x, y, z)
        products = np.where(boundary, grad[0] * normal[0] + grad[1] * normal[1] + grad[2] * normal[2], 0.0)

    if boundary.sum() == 0:
        raise PreconditionError("domain has no boundary samples on this chart")

    front_mask = boundary & (products >= 0)
    front = BoundaryRegion("F_phi", front_mask, normal, frame)
    enlarged = BoundaryRegion("F_tilde", _dilate(front_mask, boundary, enlarge, chart.periodic), normal, frame)
    logger.info(f"Front face: {front.count}/{int(boundary.sum())} boundary samples, F~ has {enlarged.count}")
    return FrontFace(front, front.complement(boundary, "F_phi_c"), enlarged, products)


def boundary_regions(chart: ProductChart, f1_cells: int = F1_ENLARGE_CELLS,
                     enlarge: int = FRONT_FACE_ENLARGE_CELLS) -> BoundaryRegions:
    """
    F_phi in F1 in F~ and Gamma = boundary minus closure(F1) for the chart box.

    Raises:
        PreconditionError: if F1 is not strictly inside F~
        GammaSignViolation: if <dphi, nu> >= 0 on the closure of Gamma
    """
    if f1_cells >= enlarge:
        raise PreconditionError(f"F1 ({f1_cells} cells) must be compactly inside F~ ({enlarge} cells)")
    ff = front_face(chart, enlarge=enlarge)
    boundary = chart.boundary_mask()
    f1_mask = _dilate(ff.front.mask, boundary, f1_cells, chart.periodic)
    f1 = BoundaryRegion("F1", f1_mask, ff.front.normal)
    gamma = BoundaryRegion("Gamma", boundary & ~f1_mask, ff.front.normal)
    check_gamma(chart, gamma)
    return BoundaryRegions(ff, f1, gamma, boundary)


def check_gamma(chart: ProductChart, gamma: BoundaryRegion) -> None:
    """
    Require <dx1, nu> < 0 on Gamma and its boundary neighbours.

    Raises:
        GammaSignViolation: otherwise
    """
    boundary = chart.boundary_mask()
    closure = _dilate(gamma.mask, boundary, 1, chart.periodic)
    normal = box_normals(chart)
    bad = closure & (normal[0] >= 0)
    if bad.any():
        raise GammaSignViolation(f"<dphi, nu> >= 0 at {int(bad.sum())} samples of closure(Gamma)")


def region_from_mask(chart: ProductChart, name: str, mask: np.ndarray) -> BoundaryRegion:
    return BoundaryRegion(name, mask & chart.boundary_mask(), box_normals(chart))


# ----------------------------------------------------------------------
# Conformal rescaling and log-polar charts
# ----------------------------------------------------------------------

def conformal_rescale(chart: ProductChart, eps: np.ndarray, mu: np.ndarray
                      ) -> Tuple[ProductChart, np.ndarray, np.ndarray]:
    """
    Move a conformal factor into the materials: (cg, eps, mu) -> (g, c^{1/2} eps, c^{1/2} mu).

    Raises:
        NonpositiveConformalFactor: if c <= 0 anywhere
    """
    c = chart.c
    if np.any(c <= 0):
        raise NonpositiveConformalFactor(f"conformal factor has minimum {c.min():.3e}")
    root = np.sqrt(c)
    return chart.with_conformal(None), root * np.asarray(eps), root * np.asarray(mu)


def rescale_materials(chart: ProductChart, materials: MaterialPair) -> Tuple[ProductChart, MaterialPair]:
    """conformal_rescale applied to a MaterialPair."""
    base, eps, mu = conformal_rescale(chart, materials.eps, materials.mu)
    return base, materials.with_fields(eps, mu)


def log_polar_coordinates(x: np.ndarray, orientation: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """(y1, y') with y1 = orientation * log|x| and y' = x/|x| on the unit sphere."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x, axis=-1)
    if np.any(norm == 0):
        raise DomainTouchesPole("log-polar coordinates are undefined at the pole")
    return orientation * np.log(norm), x / norm[..., None]


def log_polar_euclidean_chart(center, radius: float, shape, orientation: int = -1,
                              margin: float = 0.1) -> Tuple[ProductChart, LevelSetDomain]:
    """
    Log-polar chart of a Euclidean ball in the upper half-space around the pole 0.

    The sphere factor uses polar normal coordinates about a unit vector p
    placed just outside the angular footprint of the ball, so the chart
    is (y1, r, theta) with metric |x|^2 (dy1^2 + dr^2 + sin(r)^2 dtheta^2).
    With orientation -1 (y1 = -log|x|) the chart's front face is
    F(0) = {x . nu <= 0}.

    Returns:
        (chart with conformal factor c = |x|^2, ball as a level-set domain)

    Raises:
        DomainTouchesPole: if the ball closure meets 0 or the plane x3 = 0
    """
    center = np.asarray(center, dtype=float)
    dist = float(np.linalg.norm(center))
    if radius >= dist:
        raise DomainTouchesPole(f"ball of radius {radius} at distance {dist} contains the pole")
    if center[2] - radius <= 0:
        raise DomainTouchesPole("ball closure meets the plane x3 = 0")

    u = center / dist
    half_angle = float(np.arcsin(radius / dist))
    offset = half_angle + margin
    # any unit vector orthogonal to u, preferring the horizontal plane
    trial = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a0 = trial - (trial @ u) * u
    a0 /= np.linalg.norm(a0)
    pole = np.cos(offset) * u - np.sin(offset) * a0
    a = (u - (u @ pole) * pole)
    a /= np.linalg.norm(a)
    b = np.cross(pole, a)

    sector = float(np.arcsin(min(1.0, np.sin(half_angle) / np.sin(offset)))) + margin
    log_lo, log_hi = np.log(dist - radius) - margin, np.log(dist + radius) + margin
    y1_range = (orientation * log_lo, orientation * log_hi) if orientation > 0 else (orientation * log_hi,
                                                                                     orientation * log_lo)
    surface = build_surface("spherical_cap", r_max=offset + half_angle + margin)
    surface = SimpleSurface(kind="round_sphere_sector", metric_expr=surface.metric_expr, periodic=False,
                            r_max=offset + half_angle + margin, params={})
    embedding = LogPolarEmbedding(tuple(pole), tuple(a), tuple(b), orientation)
    chart = ProductChart(surface=surface, x1_range=y1_range,
                         r_range=(max(offset - half_angle - margin, 1e-3), offset + half_angle + margin),
                         shape=tuple(shape), theta_range=(-sector, sector), embedding=embedding)

    x, y, z = embedding.to_physical(*chart.mesh())
    if np.any(z <= 0):
        raise DomainTouchesPole("log-polar chart leaves the half-space x3 > 0")
    chart = chart.with_conformal(x**2 + y**2 + z**2)

    ball = LevelSetDomain(
        rho=lambda x, y, z: (x - center[0])**2 + (y - center[1])**2 + (z - center[2])**2 - radius**2,
        gradient=lambda x, y, z: (2 * (x - center[0]), 2 * (y - center[1]), 2 * (z - center[2])),
    )
    logger.info(f"Log-polar chart for ball at {center.tolist()} (R = {radius}), pole direction {np.round(pole, 4).tolist()}")
    return chart, ball
