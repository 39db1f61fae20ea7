"""
Result records produced by the forward, CGO, Carleman, ray-transform and
recovery services.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.chart import BoundaryRegion
from models.forms import BoundaryForm
from utils.errors import PreconditionError, ResolutionExceeded


@dataclass
class SolverReport:
    """
    Diagnostics of one forward solve.

    Attributes:
        residual: ||Kx - b|| / ||b|| of the square Dirichlet system
        maxwell_residual: Enforced Maxwell rows (2-form rows everywhere, 1-form rows
            at interior nodes) relative to ||f||
        conditioning: Estimated sigma_min / sigma_max (None when not probed)
        iterations: Krylov iterations (1 for a direct factorization)
        method: 'splu', 'lsqr' or 'trivial'
        omega: Frequency actually solved at
        perturbed: True when omega was moved away from a resonance
    """
    residual: float
    maxwell_residual: float
    conditioning: Optional[float]
    iterations: int
    method: str
    omega: float
    perturbed: bool = False

    def succeeded(self, tol: float) -> bool:
        return self.residual <= tol and self.maxwell_residual <= tol

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "maxwell_residual": self.maxwell_residual,
            "conditioning": self.conditioning,
            "iterations": self.iterations,
            "method": self.method,
            "omega": self.omega,
            "perturbed": self.perturbed,
        }


@dataclass(eq=False)
class CauchyRecord:
    """
    One element of a partial Cauchy data set.

    Attributes:
        f: Input trace tE, supported in gamma1
        output: Output trace tH restricted to gamma2
        gamma1: Input region
        gamma2: Output region
        omega: Frequency
        report: Forward-solve diagnostics
    """
    f: BoundaryForm
    output: BoundaryForm
    gamma1: BoundaryRegion
    gamma2: BoundaryRegion
    omega: float
    report: Optional[SolverReport] = None

    def distance(self, other: "CauchyRecord") -> float:
        """Largest absolute difference of inputs and outputs."""
        return max((self.f - other.f).max_abs(), (self.output - other.output).max_abs())

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "gamma1": self.gamma1.name,
            "gamma2": self.gamma2.name,
            "gamma1_samples": self.gamma1.count,
            "gamma2_samples": self.gamma2.count,
            "input_max": self.f.max_abs(),
            "output_max": self.output.max_abs(),
            "report": self.report.to_dict() if self.report else None,
        }


def _fourier_series(coeffs: Tuple[complex, ...], theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta)
    degree = (len(coeffs) - 1) // 2
    return sum(c * np.exp(1j * k * theta) for k, c in zip(range(-degree, degree + 1), coeffs))


@dataclass(frozen=True)
class CgoConfig:
    """
    Parameters of one CGO solution.

    Attributes:
        tau: Carleman parameter (> 0)
        lam: Frequency shift lambda (>= 0, > 0 for type a)
        s0: Scalar-slot switch
        t0: Volume-slot switch
        b: Fourier coefficients of b(theta), index k - K for k = 0..2K
        flavor: 'a' (no boundary conditions) or 'b' (vanishing on Gamma)
        b_r: Fourier coefficients of b_r(theta), the radial correction amplitude
    """
    tau: float
    lam: float = 0.0
    s0: float = 1.0
    t0: float = 0.0
    b: Tuple[complex, ...] = (1.0,)
    flavor: str = "a"
    b_r: Tuple[complex, ...] = (1.0,)

    def __post_init__(self):
        if self.tau <= 0:
            raise PreconditionError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise PreconditionError(f"lambda must be nonnegative, got {self.lam}")
        if self.flavor not in ("a", "b"):
            raise PreconditionError(f"unknown CGO flavor '{self.flavor}'")
        for name, coeffs in (("b", self.b), ("b_r", self.b_r)):
            if len(coeffs) % 2 != 1:
                raise PreconditionError(f"{name} needs an odd number of Fourier coefficients (k = -K..K)")

    @property
    def phase_sign(self) -> int:
        """Sign of the x1 exponent: e^{-tau(x1 + ir)} for type a, e^{+tau(x1 + ir)} for type b."""
        return -1 if self.flavor == "a" else 1

    @property
    def degree(self) -> int:
        return (len(self.b) - 1) // 2

    def modes(self) -> np.ndarray:
        return np.arange(-self.degree, self.degree + 1)

    def b_values(self, theta: np.ndarray) -> np.ndarray:
        """b(theta) = sum_k b_k e^{ik theta}."""
        return _fourier_series(self.b, theta)

    def b_r_values(self, theta: np.ndarray) -> np.ndarray:
        return _fourier_series(self.b_r, theta)

    def b_derivative(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta)
        return sum(1j * k * c * np.exp(1j * k * theta) for k, c in zip(self.modes(), self.b))

    def check_resolution(self, spacings, bound: float) -> None:
        """
        Raises:
            ResolutionExceeded: if max(tau, lambda) * max(h1, hr) > bound
        """
        h = max(spacings[0], spacings[1])
        worst = max(self.tau, self.lam) * h
        if worst > bound:
            raise ResolutionExceeded(f"max(tau, lambda) * h = {worst:.3f} exceeds {bound} "
                                     f"(tau = {self.tau}, lambda = {self.lam}, h = {h:.4f})")

    def with_tau(self, tau: float) -> "CgoConfig":
        return replace(self, tau=tau)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "lambda": self.lam,
            "s0": self.s0,
            "t0": self.t0,
            "b": [[complex(c).real, complex(c).imag] for c in self.b],
            "flavor": self.flavor,
            "b_r": [[complex(c).real, complex(c).imag] for c in self.b_r],
            "phase_sign": self.phase_sign,
        }


@dataclass
class CarlemanSample:
    """
    Both sides of the Carleman estimate for one test form.

    Attributes:
        seed: Seed of the random test form
        tau: Carleman parameter
        terms: (tau||u||, ||grad u||, tau^{3/2}||t i_nu u||, sqrt(tau)||grad' t i_nu u||,
                sqrt(tau)||t grad_nu u_par||)
        rhs: ||e^{tau phi}(-Lap + Qhat)e^{-tau phi} u||
        norm_u: ||u||
        family: 'interior' or 'gamma'
    """
    seed: int
    tau: float
    terms: Tuple[float, float, float, float, float]
    rhs: float
    norm_u: float
    family: str = "interior"

    @property
    def lhs(self) -> float:
        return float(sum(self.terms))

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else float("inf")

    def to_row(self) -> dict:
        row = {"seed": self.seed, "tau": self.tau, "family": self.family}
        for name, value in zip(("tau_u", "grad_u", "trace_normal", "trace_tangential_grad",
                                "trace_normal_derivative"), self.terms):
            row[name] = value
        row["rhs"] = self.rhs
        row["ratio"] = self.ratio
        return row


@dataclass
class CarlemanScan:
    """Samples of one scan with the fitted constant and verdict."""
    samples: List[CarlemanSample]
    fitted_c: float
    stability: float
    verdict: str
    term_slopes: Dict[str, float] = field(default_factory=dict)


@dataclass(eq=False)
class Sinogram:
    """
    Attenuated ray-transform data.

    Attributes:
        values: Shape (n_centers, n_angles, n_lambda)
        centers: Source points, shape (n_centers, 2)
        angles: Launch angles theta0, shape (n_centers, n_angles)
        lambdas: Attenuations
        step: Quadrature step along geodesics
        lengths: Chord length of each geodesic, shape (n_centers, n_angles)
        surface: Surface kind the geodesics were traced on
    """
    values: np.ndarray
    centers: np.ndarray
    angles: np.ndarray
    lambdas: np.ndarray
    step: float
    lengths: np.ndarray
    surface: str = "flat_disc"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")

    @property
    def n_rays(self) -> int:
        return int(self.values.shape[0] * self.values.shape[1])

    def geometry_key(self) -> tuple:
        return (self.surface, self.centers.shape, self.angles.shape, round(self.step, 12),
                tuple(np.round(self.lambdas, 12)))

    def with_values(self, values: np.ndarray) -> "Sinogram":
        return replace(self, values=np.asarray(values))

    def to_dict(self) -> dict:
        return {
            "surface": self.surface,
            "centers": self.centers.tolist(),
            "n_angles": int(self.angles.shape[1]),
            "lambdas": self.lambdas.tolist(),
            "step": self.step,
        }


@dataclass
class MomentSample:
    """
    One evaluation of the integral identity.

    Attributes:
        lam: Frequency shift lambda
        b: Fourier coefficients of b(theta)
        center_index: Index of the polar-coordinate center
        s0, t0: Slot switches, (1, 0) pairs with q_alpha and (0, 1) with q_beta
        taus: Carleman parameters used
        values: Pairing ((Q1 - Q2) Z1 | Y2) at each tau
        extrapolated: Richardson value at tau -> infinity
        extrapolation_residual: Fit residual of the a + b tau^{-1/2} model
        mode: 'solver', 'amplitude' or 'oracle'
    """
    lam: float
    b: Tuple[complex, ...]
    center_index: int
    s0: float
    t0: float
    taus: List[float]
    values: List[complex]
    extrapolated: complex
    extrapolation_residual: float
    mode: str = "solver"

    def to_row(self) -> dict:
        return {
            "lambda": self.lam,
            "b_degree": (len(self.b) - 1) // 2,
            "center": self.center_index,
            "s0": self.s0,
            "t0": self.t0,
            "taus": ";".join(f"{t:g}" for t in self.taus),
            "value_re": float(np.real(self.extrapolated)),
            "value_im": float(np.imag(self.extrapolated)),
            "abs": float(abs(self.extrapolated)),
            "fit_residual": self.extrapolation_residual,
            "mode": self.mode,
        }


@dataclass(eq=False)
class RecoveryReport:
    """
    Outcome of the reconstruction pipeline.

    Attributes:
        q_alpha: Recovered q_alpha on the grid
        q_beta: Recovered q_beta on the grid
        u, v: Semilinear solution, (eps1/eps2)^{1/2} and (mu1/mu2)^{1/2}
        eps_hat, mu_hat: Reconstructed eps1 = u^2 eps2 and mu1 = v^2 mu2
        noise_floor: Calibrated moment noise floor
        threshold: Vanishing threshold for ||q hat||
        equal: True when the pipeline concludes eps1 = eps2, mu1 = mu2
        metrics: Errors against the oracle and stage diagnostics
    """
    q_alpha: np.ndarray
    q_beta: np.ndarray
    u: Optional[np.ndarray]
    v: Optional[np.ndarray]
    eps_hat: Optional[np.ndarray]
    mu_hat: Optional[np.ndarray]
    noise_floor: float
    threshold: float
    equal: bool
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "equal": self.equal,
            "noise_floor": self.noise_floor,
            "threshold": self.threshold,
            "q_alpha_norm": float(np.linalg.norm(self.q_alpha)),
            "q_beta_norm": float(np.linalg.norm(self.q_beta)),
            "metrics": {k: float(v) for k, v in self.metrics.items()},
        }
