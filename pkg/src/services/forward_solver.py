"""
Forward Service - time-harmonic Maxwell solver with tangential boundary data

Features:
- Dirac-form rows on X = (0, *H | 0, E): dE - i w mu *H = 0 (2-form rows),
  dH + i w eps *E = 0 (1-form rows) and the constraint rows d(eps *E) = 0,
  d(mu *H) = 0 that keep Phi = Psi = 0
- The 2-form rows give H = *(dE) / (i w mu) at every node, so the magnetic
  constraint row holds identically (dd = 0)
- Square system in the free E components: 1-form rows at interior nodes,
  the electric constraint row at boundary nodes with a free normal E,
  tangential E = f on the boundary
- One sparse LU per (materials, omega, chart), shared by every right-hand side
- Resonance probing by sigma_min / sigma_max with omega perturbation
- Admittance maps and partial Cauchy data sets
- Surface divergence and the normal-component identity <nu, H> = Div(tE)/(i w mu)

The chart star (c^{1/2} * on 1-forms) is used throughout, so data for
(cg, eps, mu) and (g, c^{1/2} eps, c^{1/2} mu) come from the same system.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import (NEAR_RESONANCE_THRESHOLD, RESONANCE_OMEGA_STEP, RESONANCE_SPIKE_FACTOR,
                    SOLVER_TOL)
from models.chart import BoundaryRegion, ProductChart
from models.forms import N_COMPONENTS, BoundaryForm, GradedForm
from models.materials import MaterialPair
from models.records import CauchyRecord, SolverReport
from services.exterior_calculus import INTERIOR, boundary_exterior_d, calculus_for
from utils.errors import NearResonance, NonConvergence, PreconditionError
from utils.linear_solvers import least_squares

logger = logging.getLogger(__name__)

DENSE_PROBE_COLUMNS = 3000
ONE_FORM_SLOTS = (5, 6, 7)
TWO_FORM_SLOTS = (1, 2, 3)


def _slot_index(slots: Sequence[int], n: int) -> np.ndarray:
    return np.concatenate([np.arange(s * n, (s + 1) * n) for s in slots])


def _block(op: sp.spmatrix, rows: Sequence[int], cols: Sequence[int], n: int) -> sp.csr_matrix:
    op = sp.csr_matrix(op)
    return op[_slot_index(rows, n)][:, _slot_index(cols, n)]


def _tiled(field: np.ndarray) -> sp.dia_matrix:
    """A scalar field as a diagonal over the three components of a 1- or 2-form."""
    return sp.diags(np.tile(np.asarray(field).reshape(-1), 3))


def tangential_e_mask(chart: ProductChart) -> np.ndarray:
    """(3, grid) mask of E components that are tangential on some boundary face."""
    mask = np.zeros((3,) + chart.shape, dtype=bool)
    for face in chart.faces():
        for b in face.tangent_axes:
            mask[(b,) + face.index()] = True
    return mask


def boundary_values(f: BoundaryForm, chart: ProductChart) -> np.ndarray:
    """Tangential 1-form data of f spread onto a (3, grid) array."""
    values = np.zeros((3,) + chart.shape, dtype=complex)
    for face in chart.faces():
        data = f.faces[face.name]
        for b in face.tangent_axes:
            values[(b,) + face.index()] = data[ONE_FORM_SLOTS[b]]
    return values


@dataclass
class MaxwellBlocks:
    """Slot blocks of d and of the chart star between 1-forms and 2-forms."""
    d12: sp.csr_matrix
    d23: sp.csr_matrix
    star12: sp.csr_matrix
    star21: sp.csr_matrix


def maxwell_blocks(chart: ProductChart) -> MaxwellBlocks:
    """Blocks cached on the chart, like its ExteriorCalculus."""
    if "maxwell_blocks" not in chart.cache:
        calc = calculus_for(chart)
        n = chart.size
        chart.cache["maxwell_blocks"] = MaxwellBlocks(
            d12=_block(calc.d, TWO_FORM_SLOTS, ONE_FORM_SLOTS, n),
            d23=_block(calc.d, (4,), TWO_FORM_SLOTS, n),
            star12=_block(calc.star, TWO_FORM_SLOTS, ONE_FORM_SLOTS, n),
            star21=_block(calc.star, ONE_FORM_SLOTS, TWO_FORM_SLOTS, n),
        )
    return chart.cache["maxwell_blocks"]


def assemble_operator(m: MaterialPair, chart: ProductChart) -> sp.csr_matrix:
    """
    Rows [dE - i w mu *H; dH + i w eps *E; d(eps *E); d(mu *H)] acting on (E, H).
    """
    b = maxwell_blocks(chart)
    eps3, mu3 = _tiled(m.eps), _tiled(m.mu)
    w = m.omega
    return sp.bmat([
        [b.d12, -1j * w * mu3 @ b.star12],
        [1j * w * eps3 @ b.star12, b.d12],
        [b.d23 @ eps3 @ b.star12, None],
        [None, b.d23 @ mu3 @ b.star12],
    ], format="csr")


def magnetic_operator(m: MaterialPair, chart: ProductChart) -> sp.csr_matrix:
    """E -> H = *(dE) / (i w mu), the 2-form rows solved for H."""
    b = maxwell_blocks(chart)
    inv_mu = _tiled(1.0 / m.mu)
    return (b.star21 @ inv_mu @ b.d12 / (1j * m.omega)).tocsr()


@dataclass
class DirichletSystem:
    """
    Square system in the free E components for one material pair.

    Attributes:
        matrix: Enforced rows against the free E columns (CSC, square)
        coupling: Enforced rows against the fixed tangential E columns
        fixed: Mask over the 3n E components set by the boundary data
        magnetic: E -> H map
        interior_rows: Indices (3n numbering) of the 1-form rows enforced at interior nodes
    """
    matrix: sp.csc_matrix
    coupling: sp.csr_matrix
    fixed: np.ndarray
    magnetic: sp.csr_matrix
    interior_rows: np.ndarray


def dirichlet_system(m: MaterialPair, chart: ProductChart) -> DirichletSystem:
    """
    Eliminate H and pick one row per free E component.

    Interior nodes carry i w (dH + i w eps *E) = d(*(dE)/mu) - w^2 eps *E
    on their three 2-form rows; a boundary node on a single face has only
    its normal E free and carries d(eps *E) = 0. Nodes on two faces have
    every E component fixed.

    Raises:
        PreconditionError: if the materials grid differs from the chart
    """
    if m.eps.shape != chart.shape:
        raise PreconditionError(f"materials grid {m.eps.shape} differs from chart {chart.shape}")
    b = maxwell_blocks(chart)
    n = chart.size
    eps3 = _tiled(m.eps)
    magnetic = magnetic_operator(m, chart)
    wave = (1j * m.omega * (b.d12 @ magnetic) - m.omega**2 * (eps3 @ b.star12)).tocsr()
    divergence = (b.d23 @ eps3 @ b.star12).tocsr()

    fixed = tangential_e_mask(chart).reshape(-1)
    boundary = chart.boundary_mask().reshape(-1)
    interior_rows = np.concatenate([np.flatnonzero(~boundary) + k * n for k in range(3)])
    free_normal = boundary & ~fixed.reshape(3, n).all(axis=0)
    rows = sp.vstack([wave[interior_rows], divergence[np.flatnonzero(free_normal)]]).tocsc()
    matrix = rows[:, ~fixed].tocsc()
    if matrix.shape[0] != matrix.shape[1]:
        raise PreconditionError(f"boundary closure left a {matrix.shape} system")
    return DirichletSystem(matrix, rows[:, fixed].tocsr(), fixed, magnetic, interior_rows)


def inverse_conditioning(A: sp.spmatrix, lu=None) -> float:
    """
    sigma_min / sigma_max of a square A.

    Dense SVD for small systems; otherwise Lanczos on A^H A for the top
    eigenvalue and on (A^H A)^{-1} through the LU factors for the bottom one.
    """
    if A.shape[1] <= DENSE_PROBE_COLUMNS:
        sigma = np.linalg.svd(A.toarray(), compute_uv=False)
        return float(sigma[-1] / sigma[0]) if sigma[0] > 0 else 0.0

    A = sp.csc_matrix(A)
    if lu is None:
        try:
            lu = spla.splu(A)
        except RuntimeError:
            return 0.0
    n = A.shape[1]
    AH = A.conj().T.tocsr()
    normal = spla.LinearOperator((n, n), matvec=lambda v: AH @ (A @ v), dtype=complex)
    inverse = spla.LinearOperator((n, n), matvec=lambda v: lu.solve(lu.solve(v, trans="H")), dtype=complex)
    top = spla.eigsh(normal, k=1, which="LM", return_eigenvectors=False, tol=1e-6)[0]
    bottom = 1.0 / spla.eigsh(inverse, k=1, which="LM", return_eigenvectors=False, tol=1e-6)[0]
    return float(np.sqrt(max(bottom, 0.0) / top))


class MaxwellSolver:
    """
    Discrete Maxwell boundary-value problem for one material pair.

    The factorization is built once and is read-only afterwards, so
    `solve` may be called from several threads.
    """

    def __init__(self, materials: MaterialPair, chart: ProductChart,
                 check_resonance: bool = True, threshold: float = NEAR_RESONANCE_THRESHOLD,
                 tol: float = SOLVER_TOL):
        if materials.eps.shape != chart.shape:
            raise PreconditionError(f"materials grid {materials.eps.shape} differs from chart {chart.shape}")
        self.chart = chart
        self.tol = tol
        self.threshold = threshold
        self.check_resonance = check_resonance
        self.perturbed = False
        self.conditioning: Optional[float] = None

        self._setup(materials)
        if check_resonance and self.conditioning < threshold:
            shifted = materials.omega * (1.0 + RESONANCE_OMEGA_STEP)
            logger.warning(f"🔄 omega = {materials.omega:.6g} is near resonance "
                           f"(sigma ratio {self.conditioning:.2e}), retrying at {shifted:.6g}")
            self._setup(materials.with_omega(shifted))
            self.perturbed = True
            if self.conditioning < threshold:
                raise NearResonance(f"omega = {shifted:.6g} still near resonance "
                                    f"(sigma ratio {self.conditioning:.2e} < {threshold:.1e})")

    def _setup(self, materials: MaterialPair) -> None:
        self.materials = materials
        self.system = dirichlet_system(materials, self.chart)
        try:
            self.lu = spla.splu(self.system.matrix)
        except RuntimeError as e:
            logger.warning(f"⚠️ Sparse LU failed ({e}), solves will use LSQR")
            self.lu = None
        if self.check_resonance:
            self.conditioning = (inverse_conditioning(self.system.matrix, self.lu)
                                 if self.lu is not None else 0.0)

    @property
    def omega(self) -> float:
        return self.materials.omega

    def solve(self, f: BoundaryForm) -> Tuple[np.ndarray, np.ndarray, SolverReport]:
        """
        Solve for (E, H) with tangential E equal to f on the boundary.

        Returns:
            (E, H, report), fields as (3, N1, Nr, Ntheta) orthonormal components

        Raises:
            NonConvergence: if the system residual or the Maxwell residual of the
                enforced rows exceeds tol (relative to ||f||)
        """
        system = self.system
        fixed_values = boundary_values(f, self.chart).reshape(-1)[system.fixed]
        if not np.any(fixed_values):
            x = np.zeros(system.matrix.shape[1], dtype=complex)
            report = SolverReport(0.0, 0.0, self.conditioning, 0, "trivial", self.omega, self.perturbed)
            return self._expand(x, fixed_values) + (report,)

        rhs = -(system.coupling @ fixed_values)
        if self.lu is not None:
            x = self.lu.solve(rhs)
            for _ in range(2):
                gap = rhs - system.matrix @ x
                if np.linalg.norm(gap) <= 1e-3 * self.tol * max(np.linalg.norm(rhs), np.finfo(float).tiny):
                    break
                x = x + self.lu.solve(gap)
            iterations, method = 1, "splu"
        else:
            result = least_squares(system.matrix, rhs, direct=False)
            x, iterations, method = result.x, result.iterations, result.method

        E, H = self._expand(x, fixed_values)
        scale = np.linalg.norm(fixed_values)
        residual = float(np.linalg.norm(system.matrix @ x - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))
        first, second = self._maxwell_rows(E, H)
        enforced = np.concatenate([first, second[system.interior_rows]])
        maxwell = float(np.linalg.norm(enforced) / scale)
        closure = np.delete(second, system.interior_rows)
        report = SolverReport(residual, maxwell, self.conditioning, iterations, method,
                              self.omega, self.perturbed)
        if residual > self.tol or maxwell > self.tol:
            logger.error(f"Forward solve residuals {residual:.3e} (system), {maxwell:.3e} (Maxwell) "
                         f"above tolerance {self.tol:.1e}")
            raise NonConvergence(f"forward solve residual {max(residual, maxwell):.3e} > {self.tol:.1e}")
        logger.debug(f"Forward solve ({method}): system residual {residual:.2e}, Maxwell residual {maxwell:.2e}, "
                     f"boundary closure defect {np.linalg.norm(closure) / scale:.2e}")
        return E, H, report

    def _maxwell_rows(self, E: np.ndarray, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """dE - i w mu *H and dH + i w eps *E as flat 2-form vectors."""
        b = maxwell_blocks(self.chart)
        m = self.materials
        e, h = E.reshape(-1), H.reshape(-1)
        first = b.d12 @ e - 1j * m.omega * (_tiled(m.mu) @ (b.star12 @ h))
        second = b.d12 @ h + 1j * m.omega * (_tiled(m.eps) @ (b.star12 @ e))
        return first, second

    def _expand(self, x: np.ndarray, fixed_values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        system = self.system
        e = np.zeros(3 * self.chart.size, dtype=complex)
        e[~system.fixed] = x
        e[system.fixed] = fixed_values
        h = system.magnetic @ e
        return e.reshape((3,) + self.chart.shape), h.reshape((3,) + self.chart.shape)


def solve_maxwell(m: MaterialPair, f: BoundaryForm, chart: ProductChart,
                  **options) -> Tuple[np.ndarray, np.ndarray, SolverReport]:
    """One-shot forward solve; see MaxwellSolver for the options."""
    return MaxwellSolver(m, chart, **options).solve(f)



def field_trace(field: np.ndarray, chart: ProductChart) -> BoundaryForm:
    """Tangential trace of a 1-form given by its (3, grid) components."""
    form = GradedForm.zeros(chart.shape)
    form.data[5:8] = field
    return calculus_for(chart).trace(form)


def restrict_to(bform: BoundaryForm, region: BoundaryRegion, chart: ProductChart) -> BoundaryForm:
    """Zero a boundary form outside a region."""
    return BoundaryForm({face.name: bform.faces[face.name] * region.mask[face.index()][None]
                         for face in chart.faces()})


def _face_profile(chart: ProductChart, axis: int, order: int) -> np.ndarray:
    """1D profile along a tangential axis: sine modes, or cosines for periodic theta."""
    coords = chart.axes[axis]
    if axis == 2 and chart.periodic:
        return np.cos((order - 1) * coords)
    s = (coords - coords[0]) / (coords[-1] - coords[0])
    return np.sin(order * np.pi * s)


def trace_basis(chart: ProductChart, region: BoundaryRegion, count: int,
                max_order: int = 6) -> List[BoundaryForm]:
    """
    Deterministic list of `count` tangential 1-form traces supported in `region`.

    Modes are products of 1D profiles per face and tangential component,
    ordered by total order, then face, then component.
    """
    basis = []
    pairs = sorted(itertools.product(range(1, max_order + 1), repeat=2), key=lambda p: (sum(p), p))
    for ka, kb in pairs:
        for face in chart.faces():
            face_mask = region.mask[face.index()]
            if not face_mask.any():
                continue
            a, b = face.tangent_axes
            profile = np.outer(_face_profile(chart, a, ka), _face_profile(chart, b, kb))
            values = profile * face_mask
            if not np.any(np.abs(values) > 1e-12):
                continue
            for comp in face.tangent_axes:
                faces = {fc.name: np.zeros((N_COMPONENTS,) + region.mask[fc.index()].shape, dtype=complex)
                         for fc in chart.faces()}
                faces[face.name][ONE_FORM_SLOTS[comp]] = values
                basis.append(BoundaryForm(faces))
                if len(basis) == count:
                    return basis
    if len(basis) < count:
        logger.warning(f"⚠️ Only {len(basis)} trace modes fit in region '{region.name}' (asked for {count})")
    return basis


def admittance(m: MaterialPair, gamma1: BoundaryRegion, gamma2: BoundaryRegion,
               basis: Sequence[BoundaryForm], chart: ProductChart,
               solver: Optional[MaxwellSolver] = None, **options) -> List[CauchyRecord]:
    """
    Partial Cauchy data: one record (f, tH on gamma2) per basis trace.

    Raises:
        PreconditionError: if a basis trace is not supported in gamma1
    """
    solver = solver or MaxwellSolver(m, chart, **options)
    records = []
    for i, f in enumerate(basis):
        outside = restrict_to(f, gamma1.complement(chart.boundary_mask()), chart)
        if outside.max_abs() > 0:
            raise PreconditionError(f"basis trace {i} is not supported in '{gamma1.name}'")
        E, H, report = solver.solve(f)
        output = restrict_to(field_trace(H, chart), gamma2, chart)
        records.append(CauchyRecord(f, output, gamma1, gamma2, solver.omega, report))
    logger.info(f"✅ Admittance: {len(records)} Cauchy records at omega = {solver.omega:.6g}")
    return records


@dataclass
class ResonanceCurve:
    """Inverse conditioning per frequency and the flagged candidates."""
    omegas: np.ndarray
    conditioning: np.ndarray
    flagged: np.ndarray

    def to_rows(self) -> List[Dict]:
        return [{"omega": float(w), "sigma_ratio": float(c), "flagged": bool(f)}
                for w, c, f in zip(self.omegas, self.conditioning, self.flagged)]


def resonance_probe(m: MaterialPair, omegas: Sequence[float], chart: ProductChart,
                    threshold: float = NEAR_RESONANCE_THRESHOLD,
                    spike_factor: float = RESONANCE_SPIKE_FACTOR) -> ResonanceCurve:
    """
    sigma_min / sigma_max of the Dirichlet system at each omega.

    A sample is flagged when it is below `threshold` or a local dip
    deeper than `spike_factor` times both neighbours.
    """
    omegas = np.asarray(list(omegas), dtype=float)
    ratios = np.zeros(len(omegas))
    for i, w in enumerate(omegas):
        ratios[i] = inverse_conditioning(dirichlet_system(m.with_omega(float(w)), chart).matrix)

    flagged = ratios < threshold
    for i in range(1, len(omegas) - 1):
        if ratios[i] < spike_factor * min(ratios[i - 1], ratios[i + 1]):
            flagged[i] = True
    if flagged.any():
        logger.warning(f"⚠️ Resonance candidates at omega = {omegas[flagged].tolist()}")
    else:
        logger.info(f"Resonance probe: no candidates in [{omegas.min():.4g}, {omegas.max():.4g}]")
    return ResonanceCurve(omegas, ratios, flagged)


# ----------------------------------------------------------------------
# Surface divergence
# ----------------------------------------------------------------------

def surface_divergence(f: BoundaryForm, chart: ProductChart) -> Dict[str, np.ndarray]:
    """
    Div f = <d_dM f, i_nu vol> per face, base metric.

    Args:
        f: Tangential boundary 1-form (slots 5..7)

    Returns:
        Face name -> scalar field on that face
    """
    df = boundary_exterior_d(f, chart)
    out = {}
    for face in chart.faces():
        vol = np.zeros(N_COMPONENTS)
        vol[4] = 1.0
        area = face.sign * (INTERIOR[face.axis] @ vol)
        out[face.name] = np.tensordot(area, df.faces[face.name], axes=(0, 0))
    return out


def normal_component_from_trace(E: np.ndarray, m: MaterialPair, chart: ProductChart) -> Dict[str, np.ndarray]:
    """<nu, H> predicted from the electric trace: Div(tE) / (i w mu)."""
    div = surface_divergence(field_trace(E, chart), chart)
    return {face.name: div[face.name] / (1j * m.omega * m.mu[face.index()]) for face in chart.faces()}


def normal_component(field: np.ndarray, chart: ProductChart) -> Dict[str, np.ndarray]:
    """<nu, X> for a 1-form X on every face."""
    return {face.name: face.sign * field[(face.axis,) + face.index()] for face in chart.faces()}


def integrate_boundary(values: Dict[str, np.ndarray], chart: ProductChart) -> complex:
    calc = calculus_for(chart)
    return complex(sum(np.sum(calc.face_weights(face) * values[face.name]) for face in chart.faces()))
