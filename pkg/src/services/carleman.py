"""
Carleman Service - numerical check of the boundary Carleman estimate

Features:
- Seeded admissible test forms (cutoff family and Gamma family)
- Discrete left-hand side terms and conjugated right-hand side
- Scans over seeds and tau with a fitted constant and stability verdict
- tau-power slopes of both sides from samples at tau and 2 tau

The weight is phi = x1, so e^{tau phi}(-Lap + Qhat)e^{-tau phi} is the
product (P_{-tau} + W*)(P_{-tau} - W bar) of conjugated Dirac operators.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import CARLEMAN_STABILITY, CUTOFF_LAYERS, DEGENERATE_RHS, WORKERS
from models.chart import BoundaryRegion, ProductChart
from models.forms import BASIS, N_COMPONENTS, BoundaryForm, GradedForm
from models.materials import MaterialPair
from models.records import CarlemanSample, CarlemanScan
from services.exterior_calculus import ExteriorCalculus, calculus_for
from services.geometry import check_gamma
from services.reduction import Potentials, build_potentials
from utils.errors import DegenerateSample, PreconditionError

logger = logging.getLogger(__name__)

TERM_NAMES = ("tau_u", "grad_u", "trace_normal", "trace_tangential_grad", "trace_normal_derivative")
FAMILIES = ("interior", "gamma")


# ----------------------------------------------------------------------
# Test forms
# ----------------------------------------------------------------------

def _axis_cutoff(n: int, layers: int, low: bool = True, high: bool = True) -> np.ndarray:
    """sin^2 ramp that is exactly zero on `layers` nodes at each selected end."""
    idx = np.arange(n, dtype=float)
    ramp = max(2.0, n / 6.0)
    out = np.ones(n)
    if low:
        out *= np.sin(0.5 * np.pi * np.clip((idx - (layers - 1)) / ramp, 0.0, 1.0)) ** 2
    if high:
        out *= np.sin(0.5 * np.pi * np.clip(((n - 1 - idx) - (layers - 1)) / ramp, 0.0, 1.0)) ** 2
    return out


def cutoff(chart: ProductChart, layers: int = CUTOFF_LAYERS, open_low_x1: bool = False) -> np.ndarray:
    """
    Product cutoff vanishing on `layers` outer node layers of every face.

    With open_low_x1 the x1 = x1_min face is left open, for test forms
    that live up to Gamma.
    """
    n1, nr, nt = chart.shape
    if min(n1, nr) <= 2 * layers + 2:
        raise PreconditionError(f"grid {chart.shape} too small for a {layers}-layer cutoff")
    chi = _axis_cutoff(n1, layers, low=not open_low_x1)[:, None, None] * _axis_cutoff(nr, layers)[None, :, None]
    if not chart.periodic:
        chi = chi * _axis_cutoff(nt, layers)[None, None, :]
    return chi


def random_smooth_form(seed: int, chart: ProductChart, degree: int = 2) -> GradedForm:
    """Seeded graded form built from low cosine modes in x1, r and low Fourier modes in theta."""
    rng = np.random.default_rng(seed)
    x1, r, theta = chart.mesh()
    xi1 = (x1 - chart.x1_range[0]) / (chart.x1_range[1] - chart.x1_range[0])
    xir = (r - chart.r_range[0]) / (chart.r_range[1] - chart.r_range[0])
    if chart.periodic:
        angular = [np.exp(1j * k * theta) for k in range(-degree, degree + 1)]
    else:
        xit = (theta - chart.theta_range[0]) / (chart.theta_range[1] - chart.theta_range[0])
        angular = [np.cos(k * np.pi * xit) for k in range(degree + 1)]

    data = np.zeros((N_COMPONENTS,) + chart.shape, dtype=complex)
    for a in range(degree + 1):
        for b in range(degree + 1):
            base = np.cos(a * np.pi * xi1) * np.cos(b * np.pi * xir)
            for ang in angular:
                coeff = (rng.standard_normal(N_COMPONENTS) + 1j * rng.standard_normal(N_COMPONENTS)) / (1 + a + b)
                data += coeff[:, None, None, None] * (base * ang)[None]
    return GradedForm(data)


def _gamma_face_nodes(chart: ProductChart, gamma: BoundaryRegion) -> np.ndarray:
    nodes = np.zeros(chart.shape, dtype=bool)
    nodes[0] = gamma.mask[0]
    return nodes


def _normal_projector(n: int) -> sp.csr_matrix:
    """nu ^ i_nu at x1 = x1_min: keeps the components containing dx1."""
    keep = np.array([0 in idx for idx in BASIS], dtype=float)
    return sp.kron(sp.diags(keep), sp.identity(n), format="csr")


def gamma_condition_operator(tau: float, calc: ExteriorCalculus, potentials: Potentials) -> sp.csr_matrix:
    """e^{tau phi} delta e^{-tau phi} u + sigma u_perp, sigma = i W bar."""
    return (calc.delta + tau * calc.e1_interior
            + 1j * potentials.Wbar.to_sparse() @ _normal_projector(calc.n)).tocsr()


def _slot_rows(nodes: np.ndarray, slots: Sequence[int], n: int) -> np.ndarray:
    flat = np.flatnonzero(nodes.reshape(-1))
    return np.concatenate([s * n + flat for s in slots])


def admissible_test_form(seed: int, gamma: Optional[BoundaryRegion], chart: ProductChart,
                         family: str = "interior", tau: float = 1.0,
                         potentials: Optional[Potentials] = None,
                         layers: int = CUTOFF_LAYERS) -> GradedForm:
    """
    Seeded test form satisfying the trace hypotheses of the estimate.

    'interior': u = chi w with chi zero on `layers` layers of every face, so
    u and its normal derivative vanish on the whole boundary.
    'gamma': u vanishes to first order off Gamma; on Gamma tu = 0 and the
    normal components are solved so that t(e^{tau phi} delta e^{-tau phi} u
    + sigma u_perp) = 0.

    Raises:
        GammaSignViolation: if Gamma meets <dphi, nu> >= 0
        PreconditionError: if the grid cannot hold the cutoff
    """
    w = random_smooth_form(seed, chart)
    if family == "interior":
        return w * cutoff(chart, layers)
    if family != "gamma":
        raise ValueError(f"unknown test-form family '{family}'")
    if gamma is None or potentials is None:
        raise PreconditionError("the Gamma family needs Gamma and the material potentials")
    check_gamma(chart, gamma)

    calc = calculus_for(chart)
    n = chart.size
    chi = cutoff(chart, layers, open_low_x1=True)
    x1 = chart.mesh()[0]
    ramp = (x1 - chart.x1_range[0]) / (chart.x1_range[1] - chart.x1_range[0])
    tangential = np.array([0 not in idx for idx in BASIS])
    data = w.data * chi[None]
    data[tangential] *= ramp[None]
    u = GradedForm(data)

    face_nodes = _gamma_face_nodes(chart, gamma)
    support = np.abs(u.data[:, 0]).max(axis=0) > 0
    if np.any(support & ~face_nodes[0]):
        raise PreconditionError("test form does not vanish on the x1_min face outside Gamma")

    normal_slots = [k for k, idx in enumerate(BASIS) if 0 in idx]
    tangential_slots = [k for k, idx in enumerate(BASIS) if 0 not in idx]
    rows = _slot_rows(face_nodes, tangential_slots, n)
    cols = _slot_rows(face_nodes, normal_slots, n)
    if rows.size == 0:
        return u

    N = gamma_condition_operator(tau, calc, potentials)[rows]
    flat = u.flat()
    flat[cols] = 0.0
    block = N[:, cols].tocsc()
    flat[cols] = spla.spsolve(block, -(N @ flat))
    return GradedForm.from_flat(flat, chart.shape)


def gamma_condition_residual(u: GradedForm, tau: float, gamma: BoundaryRegion, chart: ProductChart,
                             potentials: Potentials) -> float:
    """max |t(e^{tau phi} delta e^{-tau phi} u + sigma u_perp)| on Gamma relative to max |u|."""
    calc = calculus_for(chart)
    rows = _slot_rows(_gamma_face_nodes(chart, gamma), [k for k, idx in enumerate(BASIS) if 0 not in idx],
                      chart.size)
    values = gamma_condition_operator(tau, calc, potentials)[rows] @ u.flat()
    return float(np.max(np.abs(values)) / max(u.max_abs(), 1e-300))


# ----------------------------------------------------------------------
# Estimate terms
# ----------------------------------------------------------------------

def conjugated_q_hat(tau: float, calc: ExteriorCalculus, potentials: Potentials) -> sp.csr_matrix:
    """e^{tau x1}(-Lap + Qhat)e^{-tau x1} = (P_{-tau} + W*)(P_{-tau} - W bar)."""
    P = calc.conjugated_dirac(-tau)
    return ((P + potentials.Wstar.to_sparse()) @ (P - potentials.Wbar.to_sparse())).tocsr()


def _face_gradient_norm(calc: ExteriorCalculus, bform: BoundaryForm) -> float:
    total = 0.0
    for face in calc.chart.faces():
        grads = calc.tangential_gradient(bform)[face.name]
        total += float(np.sum(calc.face_weights(face) * np.abs(grads) ** 2))
    return float(np.sqrt(total))


def estimate_terms(u: GradedForm, tau: float, chart: ProductChart) -> tuple:
    """
    (tau||u||, ||grad u||, tau^{3/2}||t i_nu u||, sqrt(tau)||grad' t i_nu u||, sqrt(tau)||t grad_nu u_par||).
    """
    calc = calculus_for(chart)
    t_normal = calc.tangential(calc.normal_interior(u))
    t_normal_derivative = calc.tangential(calc.normal_derivative(u))
    return (
        tau * calc.norm(u),
        calc.gradient_norm(u),
        tau ** 1.5 * calc.boundary_norm(t_normal),
        np.sqrt(tau) * _face_gradient_norm(calc, t_normal),
        np.sqrt(tau) * calc.boundary_norm(t_normal_derivative),
    )


def carleman_sample(u: GradedForm, tau: float, chart: ProductChart, operator: sp.csr_matrix,
                    seed: int = 0, family: str = "interior") -> CarlemanSample:
    """
    Raises:
        DegenerateSample: if the right-hand side is below 1e-14 ||u||
    """
    calc = calculus_for(chart)
    norm_u = calc.norm(u)
    rhs = calc.norm(calc.apply(operator, u))
    if rhs < DEGENERATE_RHS * norm_u or norm_u == 0.0:
        raise DegenerateSample(f"rhs {rhs:.2e} vanishes for seed {seed} at tau = {tau:g}")
    terms = tuple(float(v) for v in estimate_terms(u, tau, chart))
    return CarlemanSample(seed=seed, tau=tau, terms=terms, rhs=rhs, norm_u=norm_u, family=family)


def term_slopes(seed: int, tau: float, gamma: Optional[BoundaryRegion], chart: ProductChart,
                potentials: Potentials, family: str = "interior") -> Dict[str, float]:
    """
    log2 of quantity(2 tau) / quantity(tau) from carleman_sample runs at tau and 2 tau.

    Always covers lhs, rhs and ratio. Per-term slopes are added for the
    gamma family only: interior test forms do not depend on tau, so their
    terms are tau^p times a fixed norm.
    """
    calc = calculus_for(chart)
    low, high = (carleman_sample(admissible_test_form(seed, gamma, chart, family, t, potentials), t, chart,
                                 conjugated_q_hat(t, calc, potentials), seed, family)
                 for t in (tau, 2.0 * tau))
    slopes = {name: float(np.log2(getattr(high, name) / getattr(low, name))) for name in ("lhs", "rhs", "ratio")}
    if family == "gamma":
        slopes.update({name: float(np.log2(b / a)) for name, a, b in zip(TERM_NAMES, low.terms, high.terms)
                       if a > 0 and b > 0})
    return slopes


def carleman_scan(n: int, taus: Sequence[float], m: MaterialPair, gamma: BoundaryRegion, chart: ProductChart,
                  family: str = "interior", seed: int = 0, workers: int = WORKERS,
                  stability_bound: float = CARLEMAN_STABILITY) -> CarlemanScan:
    """
    Evaluate both sides of the estimate on n seeded test forms at every tau.

    Returns:
        CarlemanScan with fitted C = max ratio, stability = max / median
        ratio and verdict PASS when stability <= stability_bound

    Raises:
        GammaSignViolation: if Gamma meets <dphi, nu> >= 0
        DegenerateSample: if some right-hand side vanishes
    """
    check_gamma(chart, gamma)
    potentials = build_potentials(m, chart)
    calc = calculus_for(chart)
    operators = {tau: conjugated_q_hat(tau, calc, potentials) for tau in taus}
    jobs = [(seed + k, tau) for k in range(n) for tau in taus]

    def run(job) -> CarlemanSample:
        sample_seed, tau = job
        u = admissible_test_form(sample_seed, gamma, chart, family, tau, potentials)
        return carleman_sample(u, tau, chart, operators[tau], sample_seed, family)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples: List[CarlemanSample] = list(pool.map(run, jobs))

    ratios = np.array([s.ratio for s in samples])
    fitted_c = float(ratios.max())
    stability = float(fitted_c / np.median(ratios))
    verdict = "PASS" if np.all(np.isfinite(ratios)) and stability <= stability_bound else "FAIL"

    slopes = term_slopes(seed, taus[0], gamma, chart, potentials, family)
    level = logging.INFO if verdict == "PASS" else logging.WARNING
    logger.log(level, f"{'✅' if verdict == 'PASS' else '⚠️'} Carleman scan ({family}, {len(samples)} samples): "
                      f"C = {fitted_c:.3e}, max/median = {stability:.2f} -> {verdict}")
    return CarlemanScan(samples=samples, fitted_c=fitted_c, stability=stability, verdict=verdict,
                        term_slopes=slopes)
