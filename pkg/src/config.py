"""
Configuration module for the Maxwell partial-data inversion toolkit.

This module contains tolerances, grid and sampling defaults, surface
presets and output settings. Every value can be overridden from the
environment (or a .env file); run configs can override tolerances.
"""

import os
from typing import Dict, List
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _float_list(name: str, default: str) -> List[float]:
    return [float(v) for v in os.getenv(name, default).split(",") if v.strip()]


# Application Settings
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "runs")
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
WORKERS = int(os.getenv("WORKERS", "1"))  # Worker threads for sweeps and moment batches
CONFIG_SCHEMA_VERSION = 1

# Numerical Tolerances
IDENTITY_TOL = float(os.getenv("IDENTITY_TOL", "1e-11"))  # Exact discrete identities (relative)
SOLVER_TOL = float(os.getenv("SOLVER_TOL", "1e-9"))  # Forward solve residual relative to ||f||
LSQR_ATOL = float(os.getenv("LSQR_ATOL", "1e-14"))
LSQR_BTOL = float(os.getenv("LSQR_BTOL", "1e-14"))
LSQR_ITER_LIMIT = int(os.getenv("LSQR_ITER_LIMIT", "20000"))
CG_TOL = float(os.getenv("CG_TOL", "1e-10"))
CG_MAXITER = int(os.getenv("CG_MAXITER", "5000"))

# Geometry Settings
FRONT_FACE_ENLARGE_CELLS = int(os.getenv("FRONT_FACE_ENLARGE_CELLS", "2"))  # F_phi -> F~
F1_ENLARGE_CELLS = int(os.getenv("F1_ENLARGE_CELLS", "1"))  # F_phi -> F1, must stay below F~
GEODESIC_STEP_FRACTION = float(os.getenv("GEODESIC_STEP_FRACTION", "0.5"))  # Geodesic step / h_r

# Forward Solver Settings
NEAR_RESONANCE_THRESHOLD = float(os.getenv("NEAR_RESONANCE_THRESHOLD", "1e-8"))  # sigma_min/sigma_max
RESONANCE_OMEGA_STEP = float(os.getenv("RESONANCE_OMEGA_STEP", "1e-3"))  # Relative omega perturbation
RESONANCE_SPIKE_FACTOR = float(os.getenv("RESONANCE_SPIKE_FACTOR", "0.25"))  # Local dip depth flagged by the probe
DIRECT_SOLVE_MAX_UNKNOWNS = int(os.getenv("DIRECT_SOLVE_MAX_UNKNOWNS", "2200000"))

# CGO Settings
RESOLUTION_BOUND = float(os.getenv("RESOLUTION_BOUND", "0.5"))  # tau * max(h1, hr)
B_DEGREE = int(os.getenv("B_DEGREE", "8"))  # Trigonometric degree of b(theta)
CGO_TAU_LIST = _float_list("CGO_TAU_LIST", "8,16,24,32")
MIN_NORM_DIRECT_MAX_ROWS = int(os.getenv("MIN_NORM_DIRECT_MAX_ROWS", "120000"))  # Larger remainder systems use LSQR

# Carleman Settings
CARLEMAN_SAMPLES = int(os.getenv("CARLEMAN_SAMPLES", "64"))
CARLEMAN_TAU_LIST = _float_list("CARLEMAN_TAU_LIST", "8,16,32")
CARLEMAN_STABILITY = float(os.getenv("CARLEMAN_STABILITY", "3.0"))  # PASS if max/median <= this
CUTOFF_LAYERS = int(os.getenv("CUTOFF_LAYERS", "3"))  # Cutoff is zero on this many outer layers
DEGENERATE_RHS = 1e-14

# Ray Transform Settings
RT_CENTERS = int(os.getenv("RT_CENTERS", "16"))
RT_ANGLES = int(os.getenv("RT_ANGLES", "48"))
RT_LAMBDA_GRID = _float_list("RT_LAMBDA_GRID", "0.25,0.5,1,2,4")
RT_REG = float(os.getenv("RT_REG", "1e-3"))  # Gradient-penalty weight
RT_CENTER_RADIUS = float(os.getenv("RT_CENTER_RADIUS", "1.2"))  # Centers circle radius / disc radius
RT_COVERAGE_FACTOR = 2.0  # Rays per unknown before a coverage warning

# Recovery Settings
THRESHOLD_FACTOR = float(os.getenv("THRESHOLD_FACTOR", "3.0"))  # q-hat vanishing threshold / floor
NOISE_FLOOR_MIN = float(os.getenv("NOISE_FLOOR_MIN", "1e-12"))
RANK_FRACTION_MIN = float(os.getenv("RANK_FRACTION_MIN", "0.05"))  # Numerical rank / functionals
NEWTON_TOL = float(os.getenv("NEWTON_TOL", "1e-10"))
NEWTON_MAX_ITER = int(os.getenv("NEWTON_MAX_ITER", "20"))
MOMENT_MODE = os.getenv("MOMENT_MODE", "solver")  # solver | amplitude | oracle

# Tolerances overridable per run with --tol-override key=val
TOLERANCES: Dict[str, float] = {
    "identity": IDENTITY_TOL,
    "solver": SOLVER_TOL,
    "lsqr_atol": LSQR_ATOL,
    "lsqr_btol": LSQR_BTOL,
    "cg": CG_TOL,
    "newton": NEWTON_TOL,
    "near_resonance": NEAR_RESONANCE_THRESHOLD,
    "resolution": RESOLUTION_BOUND,
    "carleman_stability": CARLEMAN_STABILITY,
    "threshold_factor": THRESHOLD_FACTOR,
}

# Simple-surface presets in polar normal coordinates: m(r, theta) = g0_theta_theta
SURFACES: Dict[str, Dict] = {
    "flat_disc": {"metric": "r**2", "periodic": True},
    "spherical_cap": {"metric": "sin(r)**2", "periodic": True},
    "perturbed_flat": {"metric": "r**2*(1 + {delta}*r*cos(theta))", "periodic": True, "delta": 0.1},
    "planar": {"metric": "1", "periodic": False},  # Cartesian slab (x1, x2, x3)
}

# Ray transform phantoms on the unit disc
PHANTOMS: Dict[str, str] = {
    "gaussian": "exp(-(x**2 + y**2)/0.18)",
    "offset_bump": "bump(sqrt((x - 0.3)**2 + (y + 0.2)**2)/0.45)",
    "two_blobs": "exp(-((x - 0.35)**2 + y**2)/0.05) - 0.6*exp(-((x + 0.3)**2 + (y - 0.25)**2)/0.04)",
}
