"""
Ray Transform Service - attenuated geodesic ray transform on simple surfaces

Features:
- Fan-beam geodesics from centers outside the unit disc (RK4 on an
  isotropic metric e^{2 sigma}|dx|^2, straight lines for the flat disc)
- Forward transform with constant attenuation, as a sparse matrix
- Exact discrete adjoint and Tikhonov inversion with a gradient penalty
- Moment functionals q -> sum q e^{i lam (x1 + ir)} b(theta) and their
  regularized inversion

Fields live on an n x n node grid over [-1, 1]^2 and are extended by zero
outside the disc.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicHermiteSpline

from config import (CG_MAXITER, CG_TOL, GEODESIC_STEP_FRACTION, RANK_FRACTION_MIN, RT_ANGLES,
                    RT_CENTER_RADIUS, RT_CENTERS, RT_COVERAGE_FACTOR, RT_REG, WORKERS)
from models.chart import ProductChart
from models.records import Sinogram
from services.exterior_calculus import calculus_for
from utils.errors import GeometryMismatch, IllPosedSampling, PreconditionError
from utils.linear_solvers import conjugate_gradient

logger = logging.getLogger(__name__)

RAY_SURFACES = ("flat_disc", "spherical_cap")


# ----------------------------------------------------------------------
# Metric
# ----------------------------------------------------------------------

def conformal_log_factor(surface: str, cap_radius: float = 1.0) -> Tuple[Callable, Callable]:
    """
    sigma and grad sigma of the disc metric e^{2 sigma}|dx|^2.

    The spherical cap of geodesic radius R is the unit disc under the
    scaled stereographic map rho = tan(R/2) x.
    """
    if surface == "flat_disc":
        return (lambda x, y: np.zeros_like(x),
                lambda x, y: (np.zeros_like(x), np.zeros_like(x)))
    if surface == "spherical_cap":
        if not 0 < cap_radius < np.pi / 2:
            raise PreconditionError(f"cap radius {cap_radius} does not give a simple surface")
        a = np.tan(0.5 * cap_radius)

        def sigma(x, y):
            return np.log(2.0 * a / (1.0 + a * a * (x * x + y * y)))

        def gradient(x, y):
            denom = 1.0 + a * a * (x * x + y * y)
            return -2.0 * a * a * x / denom, -2.0 * a * a * y / denom

        return sigma, gradient
    raise PreconditionError(f"ray transform supports {RAY_SURFACES}, got '{surface}'")


# ----------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------

@dataclass(eq=False)
class RayGeometry:
    """
    Traced geodesics and their quadrature samples.

    Attributes:
        surface: Surface kind
        n: Nodes per side of the field grid
        centers: Source points, shape (n_centers, 2)
        angles: Launch angles, shape (n_centers, n_angles)
        step: Quadrature and tracing step (metric arclength)
        entries: Arclength from the center to the disc, per ray
        lengths: Chord length inside the disc, per ray
        sample_ray: Ray index of every quadrature sample
        sample_s: Arclength of every sample from its center
        sample_w: Trapezoid weight of every sample
        sampling: Bilinear interpolation matrix, samples x grid nodes
    """
    surface: str
    n: int
    centers: np.ndarray
    angles: np.ndarray
    step: float
    entries: np.ndarray
    lengths: np.ndarray
    sample_ray: np.ndarray
    sample_s: np.ndarray
    sample_w: np.ndarray
    sample_xy: np.ndarray
    sampling: sp.csr_matrix
    operators: Dict[float, sp.csr_matrix] = field(default_factory=dict, repr=False)

    @property
    def n_rays(self) -> int:
        return int(self.angles.size)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n)

    @property
    def mask(self) -> np.ndarray:
        x, y = np.meshgrid(self.grid, self.grid, indexing="ij")
        return x * x + y * y <= 1.0 + 1e-12

    @property
    def unknowns(self) -> int:
        return int(self.mask.sum())

    def key(self) -> tuple:
        return (self.surface, self.centers.shape, self.angles.shape, round(self.step, 12))

    def weights(self, lam: float, internal: bool = False) -> sp.csr_matrix:
        """Rays x samples matrix of trapezoid weights times the attenuation."""
        factor = attenuation(self.sample_s, lam, internal)
        return sp.csr_matrix((self.sample_w * factor, (self.sample_ray, np.arange(self.sample_s.size))),
                             shape=(self.n_rays, self.sample_s.size))

    def operator(self, lam: float) -> sp.csr_matrix:
        """T_lam restricted to the grid nodes inside the disc."""
        if lam not in self.operators:
            full = (self.weights(lam) @ self.sampling).tocsc()
            self.operators[lam] = full[:, np.flatnonzero(self.mask.reshape(-1))].tocsr()
        return self.operators[lam]


def attenuation(s: np.ndarray, lam: float, internal: bool = False) -> np.ndarray:
    """
    exp(-lam s), or exp(-int_0^s lam ds') accumulated by trapezoid when internal.
    """
    s = np.asarray(s, dtype=float)
    if not internal:
        return np.exp(-lam * s)
    order = np.argsort(s)
    nodes = np.concatenate([[0.0], s[order]])
    accumulated = cumulative_trapezoid(np.full(nodes.size, float(lam)), nodes, initial=0.0)[1:]
    out = np.empty_like(s)
    out[order] = np.exp(-accumulated)
    return out


def _bilinear(points: np.ndarray, n: int) -> sp.csr_matrix:
    h = 2.0 / (n - 1)
    u = (np.clip(points[:, 0], -1.0, 1.0) + 1.0) / h
    v = (np.clip(points[:, 1], -1.0, 1.0) + 1.0) / h
    i = np.minimum(np.floor(u).astype(int), n - 2)
    j = np.minimum(np.floor(v).astype(int), n - 2)
    fu, fv = u - i, v - j
    rows = np.repeat(np.arange(points.shape[0]), 4)
    cols = np.stack([i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1], axis=1).reshape(-1)
    vals = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1).reshape(-1)
    return sp.csr_matrix((vals, (rows, cols)), shape=(points.shape[0], n * n))


def _crossing(p0: np.ndarray, p1: np.ndarray, entering: bool) -> float:
    """Fraction t of the segment p0 -> p1 where it meets the unit circle."""
    d = p1 - p0
    a, b, c = d @ d, 2.0 * p0 @ d, p0 @ p0 - 1.0
    root = np.sqrt(max(b * b - 4 * a * c, 0.0))
    t = (-b - root) / (2 * a) if entering else (-b + root) / (2 * a)
    return float(np.clip(t, 0.0, 1.0))


def _trace_fan(center: np.ndarray, betas: np.ndarray, step: float, sigma, grad_sigma) -> list:
    """RK4 on (x, y, beta) for one fan; returns per-ray (s_in, s_out, s_nodes, xy_nodes)."""
    e_max = float(np.exp(np.max(sigma(np.array([0.0, 2.5]), np.array([0.0, 0.0])))))
    s_max = (np.linalg.norm(center) + 1.2) * max(1.0, e_max) + 2 * step
    n_steps = int(np.ceil(s_max / step))

    def rhs(x, y, b):
        e = np.exp(-sigma(x, y))
        gx, gy = grad_sigma(x, y)
        return e * np.cos(b), e * np.sin(b), e * (-np.sin(b) * gx + np.cos(b) * gy)

    x = np.full(betas.shape, center[0], dtype=float)
    y = np.full(betas.shape, center[1], dtype=float)
    b = betas.astype(float).copy()
    xs, ys, dxs, dys = [x.copy()], [y.copy()], [], []
    for _ in range(n_steps):
        k1 = rhs(x, y, b)
        dxs.append(k1[0])
        dys.append(k1[1])
        k2 = rhs(x + 0.5 * step * k1[0], y + 0.5 * step * k1[1], b + 0.5 * step * k1[2])
        k3 = rhs(x + 0.5 * step * k2[0], y + 0.5 * step * k2[1], b + 0.5 * step * k2[2])
        k4 = rhs(x + step * k3[0], y + step * k3[1], b + step * k3[2])
        x = x + step / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y = y + step / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        b = b + step / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        xs.append(x.copy())
        ys.append(y.copy())
    last = rhs(x, y, b)
    dxs.append(last[0])
    dys.append(last[1])

    X, Y = np.array(xs), np.array(ys)
    DX, DY = np.array(dxs), np.array(dys)
    s = step * np.arange(n_steps + 1)
    rays = []
    for k in range(betas.size):
        inside = np.flatnonzero(X[:, k] ** 2 + Y[:, k] ** 2 <= 1.0)
        if inside.size == 0 or inside[0] == 0 or inside[-1] == n_steps:
            rays.append((0.0, 0.0, np.zeros(0), np.zeros((0, 2))))
            continue
        i0, i1 = inside[0], inside[-1]
        pts = np.stack([X[:, k], Y[:, k]], axis=1)
        s_in = s[i0 - 1] + step * _crossing(pts[i0 - 1], pts[i0], True)
        s_out = s[i1] + step * _crossing(pts[i1], pts[i1 + 1], False)
        length = s_out - s_in
        segments = max(2, int(np.ceil(length / step)))
        nodes = np.linspace(s_in, s_out, segments + 1)
        xy = np.stack([CubicHermiteSpline(s, X[:, k], DX[:, k])(nodes),
                       CubicHermiteSpline(s, Y[:, k], DY[:, k])(nodes)], axis=1)
        rays.append((s_in, s_out, nodes, xy))
    return rays


def build_ray_geometry(surface: str = "flat_disc", n: int = 64, n_centers: int = RT_CENTERS,
                       n_angles: int = RT_ANGLES, step: Optional[float] = None,
                       center_radius: float = RT_CENTER_RADIUS, cap_radius: float = 1.0,
                       workers: int = WORKERS) -> RayGeometry:
    """
    Trace fan-beam geodesics from n_centers points on a circle around the disc.

    Launch angles cover +-0.98 asin(1/center_radius) around the inward direction.
    """
    if center_radius <= 1.0:
        raise PreconditionError("centers must lie outside the unit disc")
    sigma, grad_sigma = conformal_log_factor(surface, cap_radius)
    step = step or GEODESIC_STEP_FRACTION * 2.0 / (n - 1)
    phis = 2.0 * np.pi * np.arange(n_centers) / n_centers
    centers = center_radius * np.stack([np.cos(phis), np.sin(phis)], axis=1)
    spread = 0.98 * np.arcsin(1.0 / center_radius)
    offsets = np.linspace(-spread, spread, n_angles)
    angles = (phis + np.pi)[:, None] + offsets[None, :]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fans = list(pool.map(lambda c: _trace_fan(centers[c], angles[c], step, sigma, grad_sigma),
                             range(n_centers)))

    entries = np.zeros(angles.shape)
    lengths = np.zeros(angles.shape)
    ray_ids, s_all, w_all, xy_all = [], [], [], []
    for c, fan in enumerate(fans):
        for a, (s_in, s_out, nodes, xy) in enumerate(fan):
            entries[c, a], lengths[c, a] = s_in, s_out - s_in
            if nodes.size == 0:
                continue
            h = (s_out - s_in) / (nodes.size - 1)
            w = np.full(nodes.size, h)
            w[0] = w[-1] = 0.5 * h
            ray_ids.append(np.full(nodes.size, c * n_angles + a))
            s_all.append(nodes)
            w_all.append(w)
            xy_all.append(xy)

    xy = np.concatenate(xy_all) if xy_all else np.zeros((0, 2))
    geometry = RayGeometry(
        surface=surface, n=n, centers=centers, angles=angles, step=step,
        entries=entries, lengths=lengths,
        sample_ray=np.concatenate(ray_ids).astype(int) if ray_ids else np.zeros(0, dtype=int),
        sample_s=np.concatenate(s_all) if s_all else np.zeros(0),
        sample_w=np.concatenate(w_all) if w_all else np.zeros(0),
        sample_xy=xy, sampling=_bilinear(xy, n),
    )
    hits = int(np.count_nonzero(lengths))
    logger.info(f"Traced {geometry.n_rays} geodesics on {surface} ({hits} meet the disc), "
                f"{geometry.sample_s.size} quadrature samples")
    return geometry


# ----------------------------------------------------------------------
# Forward, adjoint, inverse
# ----------------------------------------------------------------------

def attenuated_ray_transform(f: Union[np.ndarray, Callable], lambdas: Sequence[float],
                             geometry: RayGeometry, internal: bool = False) -> Sinogram:
    """
    int f(gamma(r)) exp(-lam r) dr along every geodesic, r measured from the center.

    Args:
        f: Node values on the n x n grid (zero-extended outside the disc),
            or a callable f(x, y) sampled exactly at the quadrature nodes
        lambdas: Attenuations
        internal: Accumulate the attenuation exponent by quadrature
    """
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if callable(f):
        samples = np.asarray(f(geometry.sample_xy[:, 0], geometry.sample_xy[:, 1]))
    else:
        field_values = np.asarray(f)
        if field_values.shape != (geometry.n, geometry.n):
            raise GeometryMismatch(f"field shape {field_values.shape} != grid ({geometry.n}, {geometry.n})")
        samples = geometry.sampling @ (field_values * geometry.mask).reshape(-1)

    dtype = complex if np.iscomplexobj(samples) else float
    values = np.zeros(geometry.angles.shape + (lambdas.size,), dtype=dtype)
    for k, lam in enumerate(lambdas):
        values[..., k] = (geometry.weights(lam, internal) @ samples).reshape(geometry.angles.shape)
    return Sinogram(values=values, centers=geometry.centers, angles=geometry.angles, lambdas=lambdas,
                    step=geometry.step, lengths=geometry.lengths, surface=geometry.surface)


def _lambda_index(sinogram: Sinogram, lam: float, geometry: RayGeometry) -> int:
    if sinogram.geometry_key()[:4] != geometry.key():
        raise GeometryMismatch("sinogram was not produced on this ray geometry")
    hits = np.flatnonzero(np.isclose(sinogram.lambdas, lam))
    if hits.size == 0:
        raise GeometryMismatch(f"sinogram has no data for lambda = {lam}")
    return int(hits[0])


def adjoint_ray_transform(sinogram: Sinogram, lam: float, geometry: RayGeometry) -> np.ndarray:
    """Backprojection T_lam^H s as an n x n field, zero outside the disc."""
    k = _lambda_index(sinogram, lam, geometry)
    out = np.zeros(geometry.n * geometry.n, dtype=sinogram.values.dtype)
    out[np.flatnonzero(geometry.mask.reshape(-1))] = geometry.operator(lam).conj().T @ \
        sinogram.values[..., k].reshape(-1)
    return out.reshape(geometry.n, geometry.n)


def _masked_gradient(geometry: RayGeometry) -> sp.csr_matrix:
    n, h = geometry.n, 2.0 / (geometry.n - 1)
    diff = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h
    eye = sp.identity(n)
    full = sp.vstack([sp.kron(diff, eye), sp.kron(eye, diff)], format="csr")
    inside = geometry.mask.reshape(-1).astype(float)
    keep_rows = np.flatnonzero(np.abs(full) @ (1.0 - inside) == 0)
    return full[keep_rows][:, np.flatnonzero(inside)].tocsr()


@dataclass
class InversionResult:
    """Reconstructed field with solver diagnostics."""
    field: np.ndarray
    data_residual: float
    iterations: int
    reg_effective: float


def invert_ray_transform(sinogram: Sinogram, lam: float, geometry: RayGeometry, reg: float = RT_REG,
                         tol: float = CG_TOL, maxiter: int = CG_MAXITER) -> InversionResult:
    """
    argmin ||T f - s||^2 + reg_eff ||grad f||^2 by CG on the normal equations.

    reg_eff = reg ||T||_F^2 / ||G||_F^2 keeps reg independent of the grid.

    Raises:
        GeometryMismatch: if the sinogram belongs to another geometry
        NonConvergence: if CG hits maxiter
    """
    k = _lambda_index(sinogram, lam, geometry)
    T = geometry.operator(lam)
    G = _masked_gradient(geometry)
    if geometry.n_rays < RT_COVERAGE_FACTOR * geometry.unknowns:
        logger.warning(f"⚠️ Only {geometry.n_rays} geodesics for {geometry.unknowns} unknowns; "
                       f"coverage below {RT_COVERAGE_FACTOR:g}x")

    reg_eff = reg * spla.norm(T) ** 2 / max(spla.norm(G) ** 2, 1e-300)
    TH, GH = T.conj().T.tocsr(), G.conj().T.tocsr()
    data = sinogram.values[..., k].reshape(-1)
    rhs = TH @ data
    dtype = np.result_type(rhs.dtype, float)

    result = conjugate_gradient(lambda x: TH @ (T @ x) + reg_eff * (GH @ (G @ x)), rhs.astype(dtype),
                                tol=tol, maxiter=maxiter)
    out = np.zeros(geometry.n * geometry.n, dtype=dtype)
    out[np.flatnonzero(geometry.mask.reshape(-1))] = result.x
    norm_data = np.linalg.norm(data)
    residual = float(np.linalg.norm(T @ result.x - data) / norm_data) if norm_data else 0.0
    logger.info(f"✅ Ray-transform inversion (lambda = {lam:g}): {result.iterations} CG iterations, "
                f"relative data residual {residual:.3e}")
    return InversionResult(out.reshape(geometry.n, geometry.n), residual, result.iterations, reg_eff)


# ----------------------------------------------------------------------
# Moment functionals
# ----------------------------------------------------------------------

def moment_kernel(chart: ProductChart, lam: float, b_values: Callable[[np.ndarray], np.ndarray],
                  center: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Quadrature kernel K with sum K q = int q e^{i lam (x1 + ir)} b(theta) dx1 dr dtheta.

    (r, theta) are polar coordinates around `center`; None means the
    chart's own center. Other centers need a flat transversal surface.
    """
    calc = calculus_for(chart)
    x1, r, theta = chart.mesh()
    if center is None:
        weights = calc.volume_weights / chart.s
    else:
        if chart.surface.kind not in ("flat_disc", "planar"):
            raise PreconditionError("moment centers other than the chart's need a flat surface")
        coords = chart.physical_coordinates()
        dx, dy = coords["x"] - center[0], coords["y"] - center[1]
        r = np.hypot(dx, dy)
        if np.any(r == 0):
            raise PreconditionError(f"moment center {tuple(center)} lies on the grid")
        theta = np.arctan2(dy, dx)
        weights = calc.volume_weights / r
    return np.exp(1j * lam * (x1 + 1j * r)) * b_values(theta) * weights


@dataclass
class MomentRecovery:
    """Recovered field plus sampling diagnostics."""
    field: np.ndarray
    residual: float
    rank: int
    n_functionals: int


def _smoothing_operator(chart: ProductChart) -> sp.csr_matrix:
    calc = calculus_for(chart)
    return sp.vstack(list(calc.frame_partials), format="csr")


def fourier_x1_recover(kernels: np.ndarray, moments: np.ndarray, chart: ProductChart,
                       reg: float = 1e-6, mode: str = "ridge", real: bool = False,
                       rank_fraction: float = RANK_FRACTION_MIN, support: Optional[np.ndarray] = None,
                       tol: float = CG_TOL, maxiter: int = CG_MAXITER) -> MomentRecovery:
    """
    Regularized least-squares inversion of q -> (sum K_k q)_k.

    Args:
        kernels: Shape (K,) + chart.shape, from moment_kernel
        moments: K complex values
        reg: Relative regularization (scaled by the mean kernel energy)
        mode: 'ridge' (minimum norm) or 'smooth' (gradient penalty)
        real: Look for a real field
        support: Optional boolean mask the field is restricted to

    Raises:
        IllPosedSampling: if numerical rank / K < rank_fraction
    """
    K = kernels.shape[0]
    shape = kernels.shape[1:]
    keep = np.ones(shape, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    D = kernels.reshape(K, -1)[:, keep.reshape(-1)]
    b = np.asarray(moments, dtype=complex)
    if real:
        D = np.vstack([D.real, D.imag])
        b = np.concatenate([b.real, b.imag])

    gram = D @ D.conj().T
    eig = np.linalg.eigvalsh(gram)
    rank = int(np.sum(eig > eig.max() * 1e-12)) if eig.max() > 0 else 0
    if rank < rank_fraction * K:
        raise IllPosedSampling(f"moment design has rank {rank} for {K} functionals")

    out = np.zeros(int(np.prod(shape)), dtype=float if real else complex)
    if not np.any(b):
        return MomentRecovery(out.reshape(shape), 0.0, rank, K)

    alpha = reg * np.trace(gram).real / gram.shape[0]
    if mode == "ridge":
        x = D.conj().T @ np.linalg.solve(gram + alpha * np.eye(gram.shape[0]), b)
    elif mode == "smooth":
        G = _smoothing_operator(chart)[:, np.flatnonzero(keep.reshape(-1))]
        G = G[np.flatnonzero(np.asarray(abs(G).sum(axis=1)).ravel())]
        energy = float(np.linalg.norm(D)) ** 2
        alpha_g = reg * energy / max(spla.norm(G) ** 2, 1e-300)
        shift = 1e-3 * reg * energy / D.shape[1]
        DH, GH = D.conj().T, G.conj().T.tocsr()
        rhs = DH @ b
        result = conjugate_gradient(lambda v: DH @ (D @ v) + alpha_g * (GH @ (G @ v)) + shift * v,
                                    rhs, tol=tol, maxiter=maxiter)
        x = result.x
    else:
        raise ValueError(f"unknown recovery mode '{mode}'")

    if real:
        x = np.real(x)
    out[keep.reshape(-1)] = x
    residual = float(np.linalg.norm(D @ x - b) / np.linalg.norm(b))
    logger.info(f"Moment inversion ({mode}{', real' if real else ''}): {K} functionals, rank {rank}, "
                f"relative residual {residual:.3e}")
    return MomentRecovery(out.reshape(shape), residual, rank, K)
