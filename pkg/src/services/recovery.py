"""
Recovery Service - from CGO moments to material coefficients

Features:
- Integral identity ((Q1 - Q2) Z1 | Y2) in solver, amplitude and oracle modes
- Richardson extrapolation a + b tau^{-1/2} over a tau list
- Moment batches over (lambda, b, center, switch) with a cached type b half
- q_alpha / q_beta recovery through the moment functionals
- Semilinear unique-continuation step by damped Newton
- End-to-end reconstruction with a calibrated noise floor
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from config import (B_DEGREE, CGO_TAU_LIST, MOMENT_MODE, NEWTON_MAX_ITER, NEWTON_TOL, NOISE_FLOOR_MIN,
                    RT_LAMBDA_GRID, THRESHOLD_FACTOR, WORKERS)
from models.chart import BoundaryRegion, ProductChart
from models.forms import GradedForm
from models.materials import MaterialPair
from models.records import CgoConfig, MomentSample, RecoveryReport
from services.cgo import build_cgo_pair, build_y
from services.exterior_calculus import calculus_for
from services.geometry import boundary_regions, build_chart, rescale_materials
from services.ray_transform import fourier_x1_recover, moment_kernel
from services.reduction import (Potentials, build_potentials, check_boundary_agreement, materials_from_spec,
                                potential_difference, q_difference)
from utils.errors import ConfigInvalid, InverseProblemError, NewtonDivergence, PreconditionError, StageFailure

logger = logging.getLogger(__name__)

SWITCHES = ((1.0, 0.0), (0.0, 1.0))


# ----------------------------------------------------------------------
# Integral identity
# ----------------------------------------------------------------------

def unit_b(k: int, degree: int = B_DEGREE) -> Tuple[complex, ...]:
    """Coefficients of b(theta) = e^{ik theta}, k in -degree..degree."""
    if abs(k) > degree:
        raise PreconditionError(f"mode {k} exceeds degree {degree}")
    coeffs = [0.0] * (2 * degree + 1)
    coeffs[k + degree] = 1.0
    return tuple(coeffs)


def richardson(taus: Sequence[float], values: Sequence[complex]) -> Tuple[complex, float]:
    """
    Fit values = a + b tau^{-1/2}; returns (a, relative fit residual).

    One tau gives a = value and residual 0.
    """
    values = np.asarray(values, dtype=complex)
    if values.size == 1:
        return complex(values[0]), 0.0
    design = np.stack([np.ones(len(taus)), np.asarray(taus, dtype=float) ** -0.5], axis=1)
    coeffs, *_ = np.linalg.lstsq(design.astype(complex), values, rcond=None)
    fit = design @ coeffs
    scale = max(float(np.max(np.abs(values))), 1e-300)
    return complex(coeffs[0]), float(np.max(np.abs(fit - values)) / scale)


def pairing(dQ, z1, y, chart: ProductChart) -> complex:
    """sum over the grid of vol * sum_j ((Q1 - Q2) z1)_j y_j, the bilinear form of the identity."""
    calc = calculus_for(chart)
    return complex(np.sum(calc.component_weights * dQ.apply(z1).data * y.data))


def oracle_moment(m1: MaterialPair, m2: MaterialPair, cfg: CgoConfig, chart: ProductChart,
                  center: Optional[Sequence[float]] = None) -> complex:
    """Direct quadrature of q_alpha (s0 = 1) or q_beta (t0 = 1) against the moment functional."""
    q_alpha, q_beta = q_difference(m1, m2, chart)
    q = cfg.s0 * q_alpha + cfg.t0 * q_beta
    return complex(np.sum(moment_kernel(chart, cfg.lam, cfg.b_values, center) * q))


def integral_identity_eval(m1: MaterialPair, m2: MaterialPair, cfg: CgoConfig, gamma: BoundaryRegion,
                           chart: ProductChart, taus: Sequence[float] = CGO_TAU_LIST,
                           mode: str = MOMENT_MODE, center_index: int = 0,
                           potentials: Optional[Tuple[Potentials, Potentials]] = None,
                           y_cache: Optional[Dict] = None, check_boundary: bool = True) -> MomentSample:
    """
    ((Q1 - Q2) Z1 | Y2) at every tau, extrapolated to tau -> infinity.

    Args:
        cfg: Type a configuration (lambda, b, s0, t0); its tau is replaced
        mode: 'solver', 'amplitude' or 'oracle'
        y_cache: Dict reused across calls to share the type b half

    Raises:
        BoundaryAgreementViolated: if the materials differ near the boundary
    """
    if check_boundary:
        check_boundary_agreement(m1, m2, chart)
    if mode == "oracle":
        value = oracle_moment(m1, m2, cfg, chart)
        return MomentSample(lam=cfg.lam, b=cfg.b, center_index=center_index, s0=cfg.s0, t0=cfg.t0,
                            taus=[], values=[value], extrapolated=value, extrapolation_residual=0.0,
                            mode=mode)

    p1, p2 = potentials or (build_potentials(m1, chart), build_potentials(m2, chart))
    dQ = potential_difference(p1, p2)
    cache = y_cache if y_cache is not None else {}
    values = []
    for tau in taus:
        cfg_a = cfg.with_tau(tau)
        cfg_b = CgoConfig(tau=tau, s0=cfg.s0, t0=cfg.t0, flavor="b")
        key = (chart.chart_hash, tau, cfg.s0, cfg.t0, mode)
        if key not in cache:
            cache[key] = build_y(m2, cfg_b, gamma, chart, p2, mode)
        pair = build_cgo_pair(m1, m2, cfg_a, cfg_b, gamma, chart, (p1, p2), mode, y_solution=cache[key])
        values.append(pairing(dQ, pair.z1, pair.y, chart))

    extrapolated, residual = richardson(taus, values)
    logger.debug(f"Moment lambda = {cfg.lam:g}, center {center_index}, switch ({cfg.s0:g}, {cfg.t0:g}): "
                 f"{abs(extrapolated):.3e} (fit residual {residual:.1e})")
    return MomentSample(lam=cfg.lam, b=cfg.b, center_index=center_index, s0=cfg.s0, t0=cfg.t0,
                        taus=list(taus), values=values, extrapolated=extrapolated,
                        extrapolation_residual=residual, mode=mode)


# ----------------------------------------------------------------------
# Moment batches
# ----------------------------------------------------------------------

@dataclass(eq=False)
class CenterSetup:
    """Chart, Gamma and materials for one polar-coordinate center."""
    index: int
    center: Optional[Tuple[float, float]]
    chart: ProductChart
    gamma: BoundaryRegion
    m1: MaterialPair
    m2: MaterialPair


def design_configs(lambdas: Sequence[float], degree: int) -> List[CgoConfig]:
    """Type a configurations over the lambda grid, the e^{ik theta} basis and both switches."""
    return [CgoConfig(tau=1.0, lam=float(lam), s0=s0, t0=t0, b=unit_b(k, degree))
            for s0, t0 in SWITCHES for lam in lambdas for k in range(-degree, degree + 1)]


def moment_batch(setups: Sequence[CenterSetup], configs: Sequence[CgoConfig], taus: Sequence[float],
                 mode: str = MOMENT_MODE, workers: int = WORKERS,
                 reference: Optional[CenterSetup] = None) -> List[MomentSample]:
    """
    Moments for every (center, config).

    In oracle mode the moments are evaluated directly on the reference
    chart with the kernel of each center.
    """
    samples: List[MomentSample] = []
    for setup in setups:
        if mode == "oracle":
            ref = reference or setup
            check_boundary_agreement(ref.m1, ref.m2, ref.chart)
            q_alpha, q_beta = q_difference(ref.m1, ref.m2, ref.chart)
            for cfg in configs:
                q = cfg.s0 * q_alpha + cfg.t0 * q_beta
                value = complex(np.sum(moment_kernel(ref.chart, cfg.lam, cfg.b_values, setup.center) * q))
                samples.append(MomentSample(lam=cfg.lam, b=cfg.b, center_index=setup.index, s0=cfg.s0,
                                            t0=cfg.t0, taus=[], values=[value], extrapolated=value,
                                            extrapolation_residual=0.0, mode=mode))
            continue

        check_boundary_agreement(setup.m1, setup.m2, setup.chart)
        potentials = (build_potentials(setup.m1, setup.chart), build_potentials(setup.m2, setup.chart))
        cache: Dict = {}
        # one type b solve per (tau, switch), shared by every lambda and b
        for s0, t0 in SWITCHES:
            for tau in taus:
                cache[(setup.chart.chart_hash, tau, s0, t0, mode)] = build_y(
                    setup.m2, CgoConfig(tau=tau, s0=s0, t0=t0, flavor="b"), setup.gamma, setup.chart,
                    potentials[1], mode)

        def run(cfg: CgoConfig) -> MomentSample:
            return integral_identity_eval(setup.m1, setup.m2, cfg, setup.gamma, setup.chart, taus, mode,
                                          setup.index, potentials, cache, check_boundary=False)

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            samples.extend(pool.map(run, configs))
        logger.info(f"📚 Center {setup.index}: {len(configs)} moments ({mode})")
    return samples


def recover_q(samples: Sequence[MomentSample], chart: ProductChart,
              centers: Sequence[Optional[Tuple[float, float]]], reg: float = 1e-6,
              inversion: str = "ridge", real: bool = False, degree: Optional[int] = None
              ) -> Tuple[np.ndarray, np.ndarray, Dict[str, float]]:
    """
    q_alpha from the (1, 0) moments and q_beta from the (0, 1) moments.

    Returns:
        (q_alpha, q_beta, diagnostics)

    Raises:
        IllPosedSampling: if a moment design is too rank deficient
    """
    out, diagnostics = [], {}
    for label, (s0, t0) in zip(("alpha", "beta"), SWITCHES):
        batch = [s for s in samples if (s.s0, s.t0) == (s0, t0)]
        if not batch:
            out.append(np.zeros(chart.shape))
            continue
        kernels = np.stack([moment_kernel(chart, s.lam, CgoConfig(tau=1.0, lam=s.lam, b=s.b).b_values,
                                          centers[s.center_index]) for s in batch])
        moments = np.array([s.extrapolated for s in batch])
        result = fourier_x1_recover(kernels, moments, chart, reg=reg, mode=inversion, real=real)
        out.append(result.field)
        diagnostics[f"{label}_residual"] = result.residual
        diagnostics[f"{label}_rank"] = float(result.rank)
    return out[0], out[1], diagnostics


def cosine_similarity(a: np.ndarray, b: np.ndarray, chart: ProductChart) -> float:
    """|(a|b)| / (||a|| ||b||) with the volume quadrature."""
    w = calculus_for(chart).volume_weights
    num = abs(np.sum(w * a * np.conj(b)))
    den = np.sqrt(np.sum(w * np.abs(a) ** 2) * np.sum(w * np.abs(b) ** 2))
    return float(num / den) if den > 0 else 0.0


# ----------------------------------------------------------------------
# Semilinear step
# ----------------------------------------------------------------------

def divergence_form_operator(coefficient: np.ndarray, chart: ProductChart) -> sp.csr_matrix:
    """u -> delta(coefficient du) on scalar fields."""
    calc = calculus_for(chart)
    n = chart.size
    grad = calc.d[5 * n:8 * n, 0:n]
    div = calc.delta[0:n, 5 * n:8 * n]
    return (div @ sp.diags(np.tile(coefficient.reshape(-1), 3)) @ grad).tocsr()


@dataclass(eq=False)
class SemilinearSystem:
    """
    F1 = delta(eps2 du) + k1 (u^2 v^2 - 1) u + eps2 q_alpha u,  k1 = omega^2 eps2^2 mu2
    F2 = delta(mu2 dv) + k2 (u^2 v^2 - 1) v + mu2 q_beta v,     k2 = omega^2 eps2 mu2^2

    with u = v = 1 imposed on boundary rows.
    """
    m2: MaterialPair
    chart: ProductChart
    q_alpha: Optional[np.ndarray] = None
    q_beta: Optional[np.ndarray] = None
    L1: sp.csr_matrix = field(init=False, repr=False)
    L2: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.L1 = divergence_form_operator(self.m2.eps, self.chart)
        self.L2 = divergence_form_operator(self.m2.mu, self.chart)
        w2 = self.m2.omega ** 2
        self.k1 = (w2 * self.m2.eps ** 2 * self.m2.mu).reshape(-1)
        self.k2 = (w2 * self.m2.eps * self.m2.mu ** 2).reshape(-1)
        qa = np.zeros(self.chart.shape) if self.q_alpha is None else self.q_alpha
        qb = np.zeros(self.chart.shape) if self.q_beta is None else self.q_beta
        self.sa = (self.m2.eps * qa).reshape(-1)
        self.sb = (self.m2.mu * qb).reshape(-1)
        self.boundary = self.chart.boundary_mask().reshape(-1)

    @property
    def size(self) -> int:
        return self.chart.size

    def residual(self, x: np.ndarray) -> np.ndarray:
        n = self.size
        u, v = x[:n], x[n:]
        g = u * u * v * v - 1.0
        F1 = self.L1 @ u + self.k1 * g * u + self.sa * u
        F2 = self.L2 @ v + self.k2 * g * v + self.sb * v
        F1[self.boundary] = u[self.boundary] - 1.0
        F2[self.boundary] = v[self.boundary] - 1.0
        return np.concatenate([F1, F2])

    def jacobian(self, x: np.ndarray) -> sp.csc_matrix:
        n = self.size
        u, v = x[:n], x[n:]
        uv2 = u * u * v * v
        J11 = self.L1 + sp.diags(self.k1 * (3.0 * uv2 - 1.0) + self.sa)
        J12 = sp.diags(self.k1 * 2.0 * u ** 3 * v)
        J21 = sp.diags(self.k2 * 2.0 * u * v ** 3)
        J22 = self.L2 + sp.diags(self.k2 * (3.0 * uv2 - 1.0) + self.sb)
        J = sp.bmat([[J11, J12], [J21, J22]], format="lil")
        rows = np.concatenate([np.flatnonzero(self.boundary), n + np.flatnonzero(self.boundary)])
        for row in rows:
            J.rows[row] = [int(row)]
            J.data[row] = [1.0]
        return J.tocsc()


def jacobian_check(system: SemilinearSystem, x: np.ndarray, seed: int = 0, h: float = 1e-6) -> float:
    """Relative gap between J w and the centred difference of F along a random w."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(x.shape)
    exact = system.jacobian(x) @ w
    approx = (system.residual(x + h * w) - system.residual(x - h * w)) / (2 * h)
    return float(np.linalg.norm(exact - approx) / max(np.linalg.norm(exact), 1e-300))


def semilinear_solve(m2: MaterialPair, chart: ProductChart, q_alpha: Optional[np.ndarray] = None,
                     q_beta: Optional[np.ndarray] = None, initial: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                     tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER
                     ) -> Tuple[np.ndarray, np.ndarray, Dict]:
    """
    Damped Newton from (1, 1) (or `initial`) with backtracking on ||F||.

    Returns:
        (u, v, report) with iterations, residual history and the normal
        derivatives of u and v on the boundary

    Raises:
        NewtonDivergence: if no step decreases ||F|| or max_iter is reached
    """
    system = SemilinearSystem(m2, chart, q_alpha, q_beta)
    n = chart.size
    if initial is None:
        x = np.ones(2 * n, dtype=complex)
    else:
        x = np.concatenate([np.asarray(initial[0], dtype=complex).reshape(-1),
                            np.asarray(initial[1], dtype=complex).reshape(-1)])
    F = system.residual(x)
    history = [float(np.max(np.abs(F)))]

    iterations = 0
    while history[-1] > tol:
        if iterations >= max_iter:
            raise NewtonDivergence(f"Newton did not converge in {max_iter} iterations",
                                   report={"history": history, "fallback": "iteration limit"})
        dx = spla.spsolve(system.jacobian(x), -F)
        step = 1.0
        while True:
            trial = x + step * dx
            F_trial = system.residual(trial)
            if np.max(np.abs(F_trial)) < (1.0 - 1e-4 * step) * history[-1] or np.max(np.abs(step * dx)) <= tol:
                break
            step *= 0.5
            if step < 1e-4:
                raise NewtonDivergence("damped Newton could not decrease the residual",
                                       report={"history": history, "fallback": "line search exhausted"})
        if step < 1.0:
            logger.info(f"🔄 Newton step damped to {step:g}")
        x, F = trial, F_trial
        history.append(float(np.max(np.abs(F))))
        iterations += 1

    calc = calculus_for(chart)
    u, v = x[:n].reshape(chart.shape), x[n:].reshape(chart.shape)
    neumann = max(_normal_derivative_max(calc, u), _normal_derivative_max(calc, v))
    logger.info(f"✅ Semilinear solve: {iterations} Newton iterations, residual {history[-1]:.2e}, "
                f"max |d_nu u|, |d_nu v| = {neumann:.2e}")
    return u, v, {"iterations": iterations, "history": history, "neumann": neumann}


def _normal_derivative_max(calc, values: np.ndarray) -> float:
    normal = calc.normal_derivative(GradedForm.scalar(values))
    return float(max(np.max(np.abs(face[0])) for face in normal.faces.values()))


# ----------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------

def center_chart_spec(chart_spec: Dict, reference: ProductChart, center: Tuple[float, float]) -> Dict:
    """Polar chart around `center` whose annulus covers the reference chart."""
    coords = reference.physical_coordinates()
    dist = np.hypot(coords["x"] - center[0], coords["y"] - center[1])
    pad = reference.spacings[1]
    spec = dict(chart_spec)
    spec["center"] = list(center)
    spec["r_range"] = [max(float(dist.min()) - pad, 1e-3), float(dist.max()) + pad]
    spec.pop("theta_range", None)
    return spec


def _setup_center(index: int, center, chart_spec: Dict, reference: ProductChart,
                  m1_spec: Dict, m2_spec: Dict) -> CenterSetup:
    chart = reference if center is None else build_chart(center_chart_spec(chart_spec, reference, center))
    m1, m2 = materials_from_spec(m1_spec, chart), materials_from_spec(m2_spec, chart)
    if not chart.is_conformally_flat:
        base, m1 = rescale_materials(chart, m1)
        _, m2 = rescale_materials(chart, m2)
        chart = base
    gamma = boundary_regions(chart).gamma
    return CenterSetup(index, None if center is None else tuple(center), chart, gamma, m1, m2)


@contextmanager
def _stage(name: str, timings: Dict[str, float]):
    """Tag failures with the stage name and record wall time."""
    start = time.perf_counter()
    logger.info(f"🔄 Stage '{name}'")
    try:
        yield
    except (StageFailure, ConfigInvalid):
        raise
    except InverseProblemError as e:
        logger.error(f"❌ Stage '{name}' failed: {e}")
        raise StageFailure(name, e) from e
    finally:
        timings[name] = time.perf_counter() - start


def reconstruct_pipeline(m1_spec: Dict, m2_spec: Dict, chart_spec: Dict, options: Optional[Dict] = None
                         ) -> RecoveryReport:
    """
    Moments -> q hat -> threshold -> semilinear step -> (eps1 hat, mu1 hat).

    Options: lambdas, b_degree, centers (planar offsets; the chart's own
    center is always index 0), taus, mode, reg, inversion, real,
    threshold_factor, workers.

    Raises:
        StageFailure: naming the stage that raised
    """
    opts = dict(options or {})
    lambdas = opts.get("lambdas", RT_LAMBDA_GRID)
    degree = int(opts.get("b_degree", B_DEGREE))
    taus = opts.get("taus", CGO_TAU_LIST)
    mode = opts.get("mode", MOMENT_MODE)
    factor = float(opts.get("threshold_factor", THRESHOLD_FACTOR))
    workers = int(opts.get("workers", WORKERS))
    timings: Dict[str, float] = {}

    with _stage("setup", timings):
        reference_chart = build_chart(chart_spec)
        centers: List[Optional[Tuple[float, float]]] = [None] + [tuple(c) for c in opts.get("centers", [])]
        if len(centers) > 1 and reference_chart.surface.kind != "flat_disc":
            raise PreconditionError("extra moment centers need a flat_disc chart")
        reference = _setup_center(0, None, chart_spec, reference_chart, m1_spec, m2_spec)
        if mode == "oracle":
            # oracle moments are evaluated on the reference chart for every center
            setups = [reference] + [replace(reference, index=k, center=c)
                                    for k, c in enumerate(centers) if k > 0]
        else:
            setups = [reference] + [_setup_center(k, c, chart_spec, reference_chart, m1_spec, m2_spec)
                                    for k, c in enumerate(centers) if k > 0]
        configs = design_configs(lambdas, degree)

    with _stage("calibration", timings):
        twins = [CenterSetup(s.index, s.center, s.chart, s.gamma, s.m2, s.m2) for s in setups]
        calibration = moment_batch(twins, configs, taus, mode, workers, twins[0])
        moment_floor = max(max(abs(s.extrapolated) for s in calibration), NOISE_FLOOR_MIN)

    with _stage("moments", timings):
        samples = moment_batch(setups, configs, taus, mode, workers, reference)
        moment_max = max(abs(s.extrapolated) for s in samples)

    chart = reference.chart
    with _stage("recover_q", timings):
        recover = dict(reg=float(opts.get("reg", 1e-6)), inversion=opts.get("inversion", "ridge"),
                       real=bool(opts.get("real", False)))
        cal_alpha, cal_beta, _ = recover_q(calibration, chart, centers, **recover)
        q_alpha, q_beta, diagnostics = recover_q(samples, chart, centers, **recover)
        calc = calculus_for(chart)
        noise_floor = max(float(np.sqrt(np.sum(calc.volume_weights * (np.abs(cal_alpha) ** 2
                                                                      + np.abs(cal_beta) ** 2)))),
                          NOISE_FLOOR_MIN)
        q_norm = float(np.sqrt(np.sum(calc.volume_weights * (np.abs(q_alpha) ** 2 + np.abs(q_beta) ** 2))))
        threshold = factor * noise_floor
        equal = q_norm <= threshold
        logger.info(f"{'✅' if equal else '⚠️'} ||q hat|| = {q_norm:.3e}, threshold {threshold:.3e} -> "
                    f"{'materials agree' if equal else 'materials differ'}")

    metrics = dict(diagnostics)
    metrics.update({"q_norm": q_norm, "moment_floor": moment_floor, "moment_max": moment_max,
                    "n_moments": float(len(samples))})
    u = v = eps_hat = mu_hat = None
    with _stage("semilinear", timings):
        try:
            sources = (None, None) if equal else (q_alpha.real, q_beta.real)
            u, v, newton = semilinear_solve(reference.m2, chart, *sources)
            eps_hat, mu_hat = u ** 2 * reference.m2.eps, v ** 2 * reference.m2.mu
            metrics["newton_iterations"] = float(newton["iterations"])
        except NewtonDivergence as e:
            logger.warning(f"⚠️ Semilinear step failed: {e}")
            metrics["newton_failed"] = 1.0

    q_true_alpha, q_true_beta = q_difference(reference.m1, reference.m2, chart)
    if np.any(q_true_alpha):
        metrics["cosine_alpha"] = cosine_similarity(q_alpha, q_true_alpha, chart)
    if np.any(q_true_beta):
        metrics["cosine_beta"] = cosine_similarity(q_beta, q_true_beta, chart)
    if eps_hat is not None:
        metrics["eps_error"] = float(np.max(np.abs(eps_hat - reference.m1.eps)))
        metrics["mu_error"] = float(np.max(np.abs(mu_hat - reference.m1.mu)))
    metrics.update({f"time_{k}": v for k, v in timings.items()})

    return RecoveryReport(q_alpha=q_alpha, q_beta=q_beta, u=u, v=v, eps_hat=eps_hat, mu_hat=mu_hat,
                          noise_floor=noise_floor, threshold=threshold, equal=equal, metrics=metrics)
