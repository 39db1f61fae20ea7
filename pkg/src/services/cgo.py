"""
CGO Service - complex geometrical optics solutions

Features:
- WKB amplitudes m^{-1/4} b(theta) e^{+-i tau r} for both CGO families
- Eikonal and transport residual checks (complex-step derivatives of m)
- Conjugated Schroedinger operator without forming e^{tau x1}
- Remainder solves: interior rows only for type a, vanishing tangential
  traces on Gamma for type b
- CGO pairs (Z1, Y2) and tau sweeps with decay-slope fits

All fields are kept in the conjugated frame: Z = e^{+-tau x1} z, so the
exponential weight never appears in floating point.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from config import MIN_NORM_DIRECT_MAX_ROWS, RESOLUTION_BOUND, WORKERS
from models.chart import BoundaryRegion, ProductChart
from models.forms import BASIS, N_COMPONENTS, GradedForm
from models.materials import MaterialPair, MatrixPotential
from models.records import CgoConfig
from services.exterior_calculus import INTERIOR, WEDGE, calculus_for
from services.geometry import check_gamma, resolvable_tau_window
from services.reduction import Potentials, build_potentials
from utils.errors import PreconditionError
from utils.linear_solvers import min_norm_solve

logger = logging.getLogger(__name__)

COMPLEX_STEP = 1e-20


@dataclass
class CgoReport:
    """
    Diagnostics of one remainder solve.

    Attributes:
        tau: Carleman parameter
        flavor: 'a' or 'b'
        amplitude_norm: ||A||
        remainder_norm: ||R||
        residual: Interior residual of the conjugated equation / ||A + R||
        boundary_trace: max |t(A + R)| on Gamma / max |A + R| (type b)
        method: Linear solver used
    """
    tau: float
    flavor: str
    amplitude_norm: float
    remainder_norm: float
    residual: float
    boundary_trace: float = 0.0
    method: str = ""

    def to_row(self) -> dict:
        return {"tau": self.tau, "flavor": self.flavor, "amplitude_norm": self.amplitude_norm,
                "remainder_norm": self.remainder_norm, "residual": self.residual,
                "boundary_trace": self.boundary_trace, "method": self.method}


@dataclass(eq=False)
class CgoPair:
    """
    CGO pair in the conjugated frame.

    Attributes:
        z1: e^{tau x1} Z1, solving the conjugated (-Lap + Q1) equation
        y: e^{-tau x1} Y with Y2 = conj(Y) solving (P + W2*) Y2 = 0
        tau: Shared Carleman parameter
        reports: Remainder reports for Z1 and Z2
        y_residual: ||(P_tau - W2^t) y|| on interior samples / ||y||
        y_boundary_trace: max |t y| on Gamma / max |y|
    """
    z1: GradedForm
    y: GradedForm
    tau: float
    reports: Dict[str, CgoReport] = field(default_factory=dict)
    y_residual: float = 0.0
    y_boundary_trace: float = 0.0


# ----------------------------------------------------------------------
# Amplitudes
# ----------------------------------------------------------------------

def type_a_vector(cfg: CgoConfig) -> np.ndarray:
    """(s0, 0 | t0 *1, 0)."""
    v = np.zeros(N_COMPONENTS, dtype=complex)
    v[0], v[4] = cfg.s0, cfg.t0
    return v


def type_b_leading_vector(cfg: CgoConfig) -> np.ndarray:
    """(s0, -i s0 dx1^dr | t0 *1, i t0 *(dx1^dr))."""
    v = np.zeros(N_COMPONENTS, dtype=complex)
    v[0], v[1], v[4], v[7] = cfg.s0, -1j * cfg.s0, cfg.t0, 1j * cfg.t0
    return v


def type_b_vector(cfg: CgoConfig) -> np.ndarray:
    """
    Amplitude vector zeta of Z2 with (-i C1 + C2) zeta = v, C_a = e_a^ + i_{e_a}.

    The conjugated Dirac symbol sends e^{i tau r} zeta to tau e^{i tau r} v.
    """
    return 0.5 * (WEDGE[1] + INTERIOR[1]) @ type_b_leading_vector(cfg)


def _require_flat(chart: ProductChart) -> None:
    if not chart.is_conformally_flat:
        raise PreconditionError("CGO construction needs c = 1; rescale the chart first")


def _scalar_weight(cfg: CgoConfig, chart: ProductChart) -> np.ndarray:
    x1, r, _ = chart.mesh()
    weight = transport_amplitudes(cfg, chart)["a"]
    if cfg.flavor == "a":
        return weight * np.exp(-1j * cfg.tau * r) * np.exp(1j * cfg.lam * (x1 + 1j * r))
    return weight * np.exp(1j * cfg.tau * r)


def build_amplitude(cfg: CgoConfig, chart: ProductChart, bound: float = RESOLUTION_BOUND) -> GradedForm:
    """
    Leading WKB amplitude in the conjugated frame.

    Type a: e^{-i tau r} e^{i lam (x1 + ir)} m^{-1/4} b(theta) (s0, 0 | t0, 0).
    Type b: e^{i tau r} m^{-1/4} b(theta) zeta.

    Raises:
        ResolutionExceeded: if tau or lambda is not resolved by the grid
        PreconditionError: on charts with c != 1
    """
    _require_flat(chart)
    cfg.check_resolution(chart.spacings, bound)
    vector = type_a_vector(cfg) if cfg.flavor == "a" else type_b_vector(cfg)
    return GradedForm(vector[:, None, None, None] * _scalar_weight(cfg, chart)[None])


def leading_y(cfg: CgoConfig, chart: ProductChart) -> GradedForm:
    """e^{i tau r} m^{-1/4} b(theta) v, the leading term of y."""
    _, r, theta = chart.mesh()
    scalar = chart.m ** -0.25 * cfg.b_values(theta) * np.exp(1j * cfg.tau * r)
    return GradedForm(type_b_leading_vector(cfg)[:, None, None, None] * scalar[None])


def transport_amplitudes(cfg: CgoConfig, chart: ProductChart) -> Dict[str, np.ndarray]:
    """a = m^{-1/4} b, a_r = m^{-1/4} b_r and a_th = m^{1/4} b_th on the grid."""
    _, _, theta = chart.mesh()
    return {
        "a": chart.m ** -0.25 * cfg.b_values(theta),
        "a_r": chart.m ** -0.25 * cfg.b_r_values(theta),
        "a_th": chart.m ** 0.25 * cfg.b_derivative(theta),
    }


def eikonal_transport_residuals(chart: ProductChart, cfg: Optional[CgoConfig] = None) -> Tuple[float, float, float, float]:
    """
    Residuals of |d psi|^2 = 1 for psi = r and of the three transport equations.

        2 d_r a + 1/2 d_r(log m) a = 0          a = m^{-1/4} b
        2 d_r a_r + 1/2 d_r(log m) a_r = 0      a_r = m^{-1/4} b_r
        2 d_r a_th - 1/2 d_r(log m) a_th = 0    a_th = m^{1/4} b_th

    Radial derivatives of the closed forms are taken by complex step, so
    the transport residuals are exact up to rounding.
    """
    cfg = cfg or CgoConfig(tau=1.0)
    calc = calculus_for(chart)
    _, r, theta = chart.mesh()
    grad = calc.apply(calc.d, GradedForm.scalar(r)).comp1
    eik = float(np.max(np.abs(np.sum(grad**2, axis=0) - 1.0)))

    surface = chart.surface
    b, b_r, b_th = cfg.b_values(theta), cfg.b_r_values(theta), cfg.b_derivative(theta)

    def radial_derivative(fn):
        return np.imag(fn(r + 1j * COMPLEX_STEP)) / COMPLEX_STEP

    def metric(rr):
        return surface.metric_complex(rr, theta)

    m = metric(r).real
    log_m_r = radial_derivative(metric) / m

    def residual(power, coefficient, sign):
        amp = m ** power * coefficient
        d_amp = radial_derivative(lambda rr: metric(rr) ** power) * coefficient
        value = 2.0 * d_amp + sign * 0.5 * log_m_r * amp
        scale = max(float(np.max(np.abs(amp))), 1e-300)
        return float(np.max(np.abs(value)) / scale)

    trans = residual(-0.25, b, 1.0)
    trans_r = residual(-0.25, b_r, 1.0)
    trans_th = residual(0.25, b_th, -1.0) if np.any(b_th) else 0.0
    logger.debug(f"Eikonal {eik:.2e}, transport {trans:.2e} / {trans_r:.2e} / {trans_th:.2e}")
    return eik, trans, trans_r, trans_th


# ----------------------------------------------------------------------
# Conjugated operators
# ----------------------------------------------------------------------

def conjugated_apply(Z: GradedForm, tau: float, sign: int, Qpot: Optional[MatrixPotential],
                     chart: ProductChart, path: str = "expanded") -> GradedForm:
    """
    e^{-s tau x1} (-Lap + Q) e^{s tau x1} Z with s = sign.

    'expanded' applies -Lap - 2 s tau d_1 - tau^2 + Q; 'factored' applies
    P_{s tau}^2 + Q with P_t = e^{-t x1} P e^{t x1}. Both agree to rounding.
    """
    calc = calculus_for(chart)
    t = sign * tau
    if path == "expanded":
        d1 = sp.kron(sp.identity(N_COMPONENTS), calc.partials[0], format="csr")
        out = -calc.apply(calc.laplacian, Z) - 2.0 * t * GradedForm.from_flat(d1 @ Z.flat(), chart.shape) \
            - (t * t) * Z
    elif path == "factored":
        P_t = calc.conjugated_dirac(t)
        out = calc.apply(P_t, calc.apply(P_t, Z))
    else:
        raise ValueError(f"unknown path '{path}'")
    if Qpot is not None:
        out = out + Qpot.apply(Z)
    return out


def _node_rows(nodes: np.ndarray, slots: Sequence[int], n: int) -> np.ndarray:
    flat = np.flatnonzero(nodes.reshape(-1))
    return np.concatenate([s * n + flat for s in slots]) if flat.size else np.zeros(0, dtype=int)


def tangential_rows(chart: ProductChart, mask: np.ndarray) -> np.ndarray:
    """Sorted unique flat indices of tangential components at masked boundary samples."""
    n = chart.size
    rows = []
    for face in chart.faces():
        nodes = np.zeros(chart.shape, dtype=bool)
        nodes[face.index()] = mask[face.index()]
        slots = [k for k, idx in enumerate(BASIS) if face.axis not in idx]
        rows.append(_node_rows(nodes, slots, n))
    return np.unique(np.concatenate(rows)) if rows else np.zeros(0, dtype=int)


def interior_rows(chart: ProductChart) -> np.ndarray:
    return _node_rows(~chart.boundary_mask(), range(N_COMPONENTS), chart.size)


def _interior_norm(calc, form: GradedForm, chart: ProductChart) -> float:
    masked = GradedForm(form.data * (~chart.boundary_mask())[None])
    return calc.norm(masked)


def _trace_max(form: GradedForm, rows: np.ndarray) -> float:
    flat = form.flat()
    scale = max(float(np.max(np.abs(flat))), 1e-300)
    return float(np.max(np.abs(flat[rows])) / scale) if rows.size else 0.0


def solve_remainder(A: GradedForm, cfg: CgoConfig, m: MaterialPair, gamma: Optional[BoundaryRegion],
                    chart: ProductChart, potentials: Optional[Potentials] = None) -> Tuple[GradedForm, CgoReport]:
    """
    Minimum-norm remainder R with A + R solving the conjugated equation.

    Type a: (P_t + W)(P_t - W^t)(A + R) = 0 on interior rows, t = -tau.
    Type b: (P_t - W^t)(P_t + W)(A + R) = 0 on interior rows, t = +tau, and on
    Gamma t(A + R) = 0 and t((P_t + W)(A + R)) = 0. No rows are imposed on
    the rest of the boundary.

    Raises:
        GammaSignViolation: if Gamma meets <dphi, nu> >= 0 (type b)
        NonConvergence: if LSQR fails
    """
    _require_flat(chart)
    pots = potentials or build_potentials(m, chart)
    calc = calculus_for(chart)
    n = chart.size
    t = cfg.phase_sign * cfg.tau
    P_t = calc.conjugated_dirac(t)
    W, Wt = pots.W.to_sparse(), pots.Wt.to_sparse()
    interior = interior_rows(chart)

    if cfg.flavor == "a":
        L = ((P_t + W) @ (P_t - Wt)).tocsr()
        system = L[interior]
        gamma_rows = np.zeros(0, dtype=int)
    else:
        if gamma is None:
            raise PreconditionError("type b remainders need a Gamma region")
        check_gamma(chart, gamma)
        first = (P_t + W).tocsr()
        L = ((P_t - Wt) @ first).tocsr()
        gamma_rows = tangential_rows(chart, gamma.mask)
        identity = sp.identity(8 * n, format="csr", dtype=complex)
        system = sp.vstack([L[interior], identity[gamma_rows], first[gamma_rows]], format="csr")

    if not np.any(A.data):
        R = GradedForm.zeros(chart.shape)
        return R, CgoReport(cfg.tau, cfg.flavor, 0.0, 0.0, 0.0, 0.0, "trivial")

    rhs = -(system @ A.flat())
    result = min_norm_solve(system, rhs, direct=system.shape[0] <= MIN_NORM_DIRECT_MAX_ROWS)
    R = GradedForm.from_flat(result.x, chart.shape)
    z = A + R

    norm_z = calc.norm(z) or 1.0
    residual = _interior_norm(calc, calc.apply(L, z), chart) / norm_z
    report = CgoReport(
        tau=cfg.tau, flavor=cfg.flavor,
        amplitude_norm=calc.norm(A), remainder_norm=calc.norm(R),
        residual=residual, boundary_trace=_trace_max(z, gamma_rows), method=result.method,
    )
    logger.info(f"Remainder (type {cfg.flavor}, tau = {cfg.tau:g}): ||R|| = {report.remainder_norm:.3e}, "
                f"residual {residual:.2e} via {result.method}")
    return R, report


@dataclass(eq=False)
class YSolution:
    """y = (P_tau + W2) z2 / tau with its diagnostics; reusable across type a configs."""
    y: GradedForm
    report: Optional[CgoReport] = None
    residual: float = 0.0
    boundary_trace: float = 0.0


def build_y(m2: MaterialPair, cfg_b: CgoConfig, gamma: BoundaryRegion, chart: ProductChart,
            potentials: Optional[Potentials] = None, mode: str = "solver") -> YSolution:
    """
    Type b half of a CGO pair.

    z2 solves the conjugated (P - W2^t)(P + W2) equation with vanishing
    traces on Gamma and y = (P_tau + W2) z2 / tau, so Y = e^{tau x1} y
    solves (P - W2^t) Y = 0 and Y2 = conj(Y) solves (P + W2*) Y2 = 0.
    In 'amplitude' mode y is the leading term alone.
    """
    if cfg_b.flavor != "b":
        raise PreconditionError("build_y needs a type b configuration")
    if mode == "amplitude":
        return YSolution(y=leading_y(cfg_b, chart))
    if mode != "solver":
        raise ValueError(f"unknown CGO mode '{mode}'")

    p2 = potentials or build_potentials(m2, chart)
    calc = calculus_for(chart)
    tau = cfg_b.tau
    A2 = build_amplitude(cfg_b, chart)
    R2, report = solve_remainder(A2, cfg_b, m2, gamma, chart, p2)

    P_t = calc.conjugated_dirac(tau)
    y = calc.apply(P_t + p2.W.to_sparse(), A2 + R2) * (1.0 / tau)
    check = calc.apply(P_t - p2.Wt.to_sparse(), y)
    residual = _interior_norm(calc, check, chart) / (calc.norm(y) or 1.0)
    trace = _trace_max(y, tangential_rows(chart, gamma.mask))
    return YSolution(y=y, report=report, residual=residual, boundary_trace=trace)


def build_cgo_pair(m1: MaterialPair, m2: MaterialPair, cfg_a: CgoConfig, cfg_b: CgoConfig,
                   gamma: BoundaryRegion, chart: ProductChart,
                   potentials: Optional[Tuple[Potentials, Potentials]] = None,
                   mode: str = "solver", y_solution: Optional[YSolution] = None) -> CgoPair:
    """
    Z1 of type a for m1 and Y2 = conj(Y) built from Z2 of type b for m2.

    Args:
        mode: 'solver' (remainders included) or 'amplitude' (leading terms only)
        y_solution: Precomputed type b half for the same m2, cfg_b and chart
    """
    if cfg_a.flavor != "a" or cfg_b.flavor != "b":
        raise PreconditionError("build_cgo_pair needs a type a and a type b configuration")
    if cfg_a.tau != cfg_b.tau:
        raise PreconditionError(f"both CGOs need the same tau ({cfg_a.tau} != {cfg_b.tau})")
    if cfg_a.lam <= 0:
        raise PreconditionError("type a CGOs need lambda > 0")

    p1, p2 = potentials or (build_potentials(m1, chart), build_potentials(m2, chart))
    tau = cfg_a.tau
    A1 = build_amplitude(cfg_a, chart)
    ys = y_solution or build_y(m2, cfg_b, gamma, chart, p2, mode)

    if mode == "amplitude":
        return CgoPair(z1=A1, y=ys.y, tau=tau)
    if mode != "solver":
        raise ValueError(f"unknown CGO mode '{mode}'")

    R1, report_a = solve_remainder(A1, cfg_a, m1, None, chart, p1)
    logger.info(f"✅ CGO pair at tau = {tau:g}: ||R1|| = {report_a.remainder_norm:.3e}, "
                f"|tY| on Gamma {ys.boundary_trace:.1e}")
    reports = {"a": report_a}
    if ys.report is not None:
        reports["b"] = ys.report
    return CgoPair(z1=A1 + R1, y=ys.y, tau=tau, reports=reports,
                   y_residual=ys.residual, y_boundary_trace=ys.boundary_trace)


# ----------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------

@dataclass
class CgoSweep:
    """Remainder norms over a tau list and the fitted log-log slope."""
    taus: List[float]
    reports: List[CgoReport]
    slope: float

    def to_rows(self) -> List[dict]:
        return [r.to_row() for r in self.reports]


def decay_slope(taus: Sequence[float], norms: Sequence[float]) -> float:
    """Least-squares slope of log ||R|| against log tau."""
    if len(taus) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(taus, dtype=float)), np.log(np.asarray(norms, dtype=float)), 1)[0])


def cgo_sweep(cfg: CgoConfig, m: MaterialPair, gamma: Optional[BoundaryRegion], chart: ProductChart,
              taus: Sequence[float], workers: int = WORKERS, bound: float = RESOLUTION_BOUND) -> CgoSweep:
    """
    Remainder solves over a tau list, one thread per tau.

    Unresolved tau values are dropped with a warning.
    """
    kept = resolvable_tau_window(chart, taus, bound)
    if not kept:
        raise PreconditionError("no tau value is resolved by this grid")
    pots = build_potentials(m, chart)

    def run(tau: float) -> CgoReport:
        local = cfg.with_tau(tau)
        return solve_remainder(build_amplitude(local, chart, bound), local, m, gamma, chart, pots)[1]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        reports = list(pool.map(run, kept))
    slope = decay_slope(kept, [r.remainder_norm for r in reports])
    logger.info(f"📚 CGO sweep (type {cfg.flavor}): taus {kept}, remainder slope {slope:.3f}")
    return CgoSweep(list(kept), reports, slope)
