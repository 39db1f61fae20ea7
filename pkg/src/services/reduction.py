"""
Reduction Service - Maxwell to Dirac to Schroedinger

Features:
- Material pairs from closed-form expressions or field files
- Pointwise matrix potentials V and W (and W^t, W bar, W*)
- Q, Q' and Q hat defined compositionally through the discrete operators
- Factorization residuals of (P+W)(P-W^t) = -Lap + Q and its two siblings
- Maxwell <-> Dirac bridge with the mu^{1/2} / eps^{1/2} rescaling
- The q_alpha / q_beta oracle and the W-difference diagnostic

Pointwise algebra (wedge, star) is written for c = 1; charts carrying a
conformal factor go through geometry.conformal_rescale first.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from models.chart import ProductChart
from models.forms import EVEN, N_COMPONENTS, ODD, GradedForm
from models.materials import MaterialPair, MatrixPotential
from services.exterior_calculus import INTERIOR, STAR, WEDGE, calculus_for
from utils import expressions
from utils.errors import BoundaryAgreementViolated, ConfigInvalid, PreconditionError

logger = logging.getLogger(__name__)

_EVEN_ROWS = np.zeros(N_COMPONENTS, dtype=bool)
_EVEN_ROWS[list(EVEN)] = True
# (rows, cols) masks selecting the even<-odd and odd<-even blocks
EVEN_FROM_ODD = np.outer(_EVEN_ROWS, ~_EVEN_ROWS)
ODD_FROM_EVEN = np.outer(~_EVEN_ROWS, _EVEN_ROWS)


# ----------------------------------------------------------------------
# Materials
# ----------------------------------------------------------------------

def materials_from_spec(spec: Dict, chart: ProductChart) -> MaterialPair:
    """
    Build a MaterialPair from a config block.

    Keys: omega, and eps / mu as expressions in the chart coordinates or
    eps_file / mu_file pointing at binary field files.
    """
    if "omega" not in spec:
        raise ConfigInvalid("material block needs 'omega'")
    coords = chart.physical_coordinates()
    fields = {}
    for name in ("eps", "mu"):
        if f"{name}_file" in spec:
            from utils.field_io import read_field
            values, _ = read_field(spec[f"{name}_file"])
            if values.shape != chart.shape:
                raise ConfigInvalid(f"{name}_file has shape {values.shape}, chart is {chart.shape}")
            fields[name] = values
        else:
            fields[name] = expressions.evaluate(str(spec.get(name, "1")), coords)
    label = f"eps={spec.get('eps', spec.get('eps_file', '1'))}, mu={spec.get('mu', spec.get('mu_file', '1'))}"
    return MaterialPair(fields["eps"], fields["mu"], float(spec["omega"]), label)


def check_boundary_agreement(m1: MaterialPair, m2: MaterialPair, chart: ProductChart,
                             layers: int = 3, tol: float = 1e-12) -> None:
    """
    Require eps and mu to agree on the outer `layers` grid layers.

    Three layers carry the values and the first two one-sided differences,
    i.e. agreement to second order on the boundary.

    Raises:
        BoundaryAgreementViolated: otherwise
    """
    shell = np.zeros(chart.shape, dtype=bool)
    for face in chart.faces():
        idx = [slice(None)] * 3
        idx[face.axis] = slice(0, layers) if face.side == 0 else slice(-layers, None)
        shell[tuple(idx)] = True
    gap = max(float(np.max(np.abs(m1.eps - m2.eps)[shell])), float(np.max(np.abs(m1.mu - m2.mu)[shell])))
    if gap > tol:
        raise BoundaryAgreementViolated(f"materials differ by {gap:.3e} within {layers} boundary layers")


# ----------------------------------------------------------------------
# Pointwise algebra
# ----------------------------------------------------------------------

def frame_gradient(values: np.ndarray, chart: ProductChart) -> np.ndarray:
    """Orthonormal components (3, N1, Nr, Ntheta) of d(values)."""
    calc = calculus_for(chart)
    return calc.apply(calc.d, GradedForm.scalar(values)).comp1


def bilinear_dot(xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """<xi, eta> without conjugation (complex materials)."""
    return np.sum(xi * eta, axis=0)


def scalar_laplacian(values: np.ndarray, chart: ProductChart) -> np.ndarray:
    calc = calculus_for(chart)
    return calc.apply(calc.laplacian, GradedForm.scalar(values)).comp0


def wedge_field(xi: np.ndarray) -> np.ndarray:
    """(8, 8, grid) matrix field of xi ^ (.)."""
    return sum(WEDGE[a][:, :, None, None, None] * xi[a][None, None] for a in range(3))


def interior_field(xi: np.ndarray) -> np.ndarray:
    return sum(INTERIOR[a][:, :, None, None, None] * xi[a][None, None] for a in range(3))


def star_conjugate(matrix: np.ndarray) -> np.ndarray:
    """* M * for a (8, 8, grid) matrix field."""
    return np.einsum("ij,jk...,kl->il...", STAR, matrix, STAR)


def _scalar_field(values: np.ndarray) -> np.ndarray:
    out = np.zeros((N_COMPONENTS, N_COMPONENTS) + values.shape, dtype=complex)
    for i in range(N_COMPONENTS):
        out[i, i] = values
    return out


def _graded_diagonal(even: np.ndarray, odd: np.ndarray) -> np.ndarray:
    out = np.zeros((N_COMPONENTS, N_COMPONENTS) + even.shape, dtype=complex)
    for i in EVEN:
        out[i, i] = even
    for i in ODD:
        out[i, i] = odd
    return out


def _masked(matrix: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return matrix * mask[:, :, None, None, None]


def _require_unit_conformal(chart: ProductChart) -> None:
    if not chart.is_conformally_flat:
        raise PreconditionError("matrix potentials need c = 1; apply geometry.conformal_rescale first")


# ----------------------------------------------------------------------
# Potentials
# ----------------------------------------------------------------------

@dataclass(eq=False)
class Potentials:
    """
    Matrix potentials of one material pair on one chart.

    Attributes:
        V: Maxwell-Dirac potential, (P+V)X = 0
        W: Rescaled potential, (P+W)Y = 0
        Wt, Wbar, Wstar: Transpose, conjugate and adjoint of W
        Q: Pointwise columns of (P+W)(P-W^t) + Lap
        Qprime: Pointwise columns of (P-W^t)(P+W) + Lap
        materials: Source material pair
        chart: Chart the potentials live on
    """
    V: MatrixPotential
    W: MatrixPotential
    Wt: MatrixPotential
    Wbar: MatrixPotential
    Wstar: MatrixPotential
    Q: MatrixPotential
    Qprime: MatrixPotential
    materials: MaterialPair
    chart: ProductChart
    operators: Dict[str, sp.csr_matrix] = field(default_factory=dict, repr=False)

    def schroedinger_operator(self, kind: str = "Q") -> sp.csr_matrix:
        """
        Sparse product operator equal to -Lap + (kind) by definition.

        'Q': (P+W)(P-W^t), 'Qprime': (P-W^t)(P+W), 'Qhat': (P+W*)(P-W bar)
        """
        if kind not in self.operators:
            calc = calculus_for(self.chart)
            P = calc.dirac
            if kind == "Q":
                op = (P + self.W.to_sparse()) @ (P - self.Wt.to_sparse())
            elif kind == "Qprime":
                op = (P - self.Wt.to_sparse()) @ (P + self.W.to_sparse())
            elif kind == "Qhat":
                op = (P + self.Wstar.to_sparse()) @ (P - self.Wbar.to_sparse())
            else:
                raise ValueError(f"unknown operator kind '{kind}'")
            self.operators[kind] = op.tocsr()
        return self.operators[kind]

    def q_hat_operator(self) -> sp.csr_matrix:
        """Q hat := (P+W*)(P-W bar) + Lap, never written out entrywise."""
        calc = calculus_for(self.chart)
        return (self.schroedinger_operator("Qhat") + calc.laplacian).tocsr()


def dirac_potential_v(m: MaterialPair, chart: ProductChart) -> MatrixPotential:
    """V with -omega mu / -omega eps diagonals, *Dalpha^* (even <- odd) and Dbeta^ (odd <- even)."""
    d_alpha = -1j * frame_gradient(m.alpha, chart)
    d_beta = -1j * frame_gradient(m.beta, chart)
    values = _graded_diagonal(-m.omega * m.mu, -m.omega * m.eps)
    values += _masked(star_conjugate(wedge_field(d_alpha)), EVEN_FROM_ODD)
    values += _masked(wedge_field(d_beta), ODD_FROM_EVEN)
    return MatrixPotential(values, "V")


def dirac_potential_w(m: MaterialPair, chart: ProductChart) -> MatrixPotential:
    """W = -kappa + 1/2 [(*Dalpha^* - Dalpha^) even <- odd, (Dbeta^ + *Dbeta^*) odd <- even]."""
    d_alpha = -1j * frame_gradient(m.alpha, chart)
    d_beta = -1j * frame_gradient(m.beta, chart)
    values = _scalar_field(-m.kappa)
    values += 0.5 * _masked(star_conjugate(wedge_field(d_alpha)) - wedge_field(d_alpha), EVEN_FROM_ODD)
    values += 0.5 * _masked(wedge_field(d_beta) + star_conjugate(wedge_field(d_beta)), ODD_FROM_EVEN)
    return MatrixPotential(values, "W")


def transpose_potential_w(m: MaterialPair, chart: ProductChart) -> MatrixPotential:
    """W^t assembled from contractions instead of by transposing W."""
    d_alpha = -1j * frame_gradient(m.alpha, chart)
    d_beta = -1j * frame_gradient(m.beta, chart)
    values = _scalar_field(-m.kappa)
    values += 0.5 * _masked(star_conjugate(interior_field(d_alpha)) - interior_field(d_alpha), ODD_FROM_EVEN)
    values += 0.5 * _masked(interior_field(d_beta) + star_conjugate(interior_field(d_beta)), EVEN_FROM_ODD)
    return MatrixPotential(values, "W^t")


def compositional_columns(operator: sp.spmatrix, chart: ProductChart, name: str) -> MatrixPotential:
    """
    Pointwise matrix of a zeroth-order operator, column j being its image
    of the constant basis form e_j.
    """
    values = np.zeros((N_COMPONENTS, N_COMPONENTS) + chart.shape, dtype=complex)
    calc = calculus_for(chart)
    for j in range(N_COMPONENTS):
        basis = GradedForm.zeros(chart.shape)
        basis.data[j] = 1.0
        values[:, j] = calc.apply(operator, basis).data
    return MatrixPotential(values, name)


def build_potentials(m: MaterialPair, chart: ProductChart) -> Potentials:
    """
    Assemble V, W, W^t, W bar, W*, Q and Q' for one material pair.

    Raises:
        BranchCutCrossing: if log(eps) or log(mu) crosses the branch cut
        PreconditionError: on charts with c != 1
    """
    _require_unit_conformal(chart)
    calc = calculus_for(chart)
    V = dirac_potential_v(m, chart)
    W = dirac_potential_w(m, chart)
    potentials = Potentials(V=V, W=W, Wt=W.transpose(), Wbar=W.conj(), Wstar=W.adjoint(),
                            Q=None, Qprime=None, materials=m, chart=chart)
    potentials.Q = compositional_columns(potentials.schroedinger_operator("Q") + calc.laplacian, chart, "Q")
    potentials.Qprime = compositional_columns(potentials.schroedinger_operator("Qprime") + calc.laplacian,
                                              chart, "Q'")
    logger.debug(f"Potentials built for {m.label or 'materials'} on chart {chart.chart_hash}")
    return potentials


def explicit_q_entries(m: MaterialPair, chart: ProductChart) -> Dict[str, np.ndarray]:
    """
    The diagonal entries of Q and Q' that have closed forms.

    Returns:
        Dict with 'Q00', 'Q44', 'Qp00', 'Qp44' fields
    """
    kappa2 = m.kappa**2
    lap_a, lap_b = scalar_laplacian(m.alpha, chart), scalar_laplacian(m.beta, chart)
    ga, gb = frame_gradient(m.alpha, chart), frame_gradient(m.beta, chart)
    aa, bb = bilinear_dot(ga, ga), bilinear_dot(gb, gb)
    return {
        "Q00": -kappa2 + 0.5 * (lap_a + 0.5 * aa),
        "Q44": -kappa2 + 0.5 * (lap_b + 0.5 * bb),
        "Qp00": -kappa2 - 0.5 * (lap_b - 0.5 * bb),
        "Qp44": -kappa2 - 0.5 * (lap_a - 0.5 * aa),
    }


def factorization_residual(m: MaterialPair, Z: GradedForm, chart: ProductChart,
                           potentials: Optional[Potentials] = None) -> Tuple[float, float, float]:
    """
    Relative residuals of the three factorizations on a test form Z.

    Returns:
        (||(P+W)(P-W^t)Z - (-Lap+Q)Z||, same for Q', same for Q hat), each / ||Z||
    """
    pots = potentials or build_potentials(m, chart)
    calc = calculus_for(chart)
    P = calc.dirac
    norm_z = calc.norm(Z) or 1.0

    def sequential(first_sign, first, second_sign, second):
        inner = calc.apply(P, Z) + first_sign * first.apply(Z)
        return calc.apply(P, inner) + second_sign * second.apply(inner)

    minus_lap_z = -calc.apply(calc.laplacian, Z)
    lhs_q = sequential(-1, pots.Wt, +1, pots.W)
    lhs_qp = sequential(+1, pots.W, -1, pots.Wt)
    lhs_qhat = sequential(-1, pots.Wbar, +1, pots.Wstar)

    res_q = calc.norm(lhs_q - (minus_lap_z + pots.Q.apply(Z))) / norm_z
    res_qp = calc.norm(lhs_qp - (minus_lap_z + pots.Qprime.apply(Z))) / norm_z
    res_qhat = calc.norm(lhs_qhat - (minus_lap_z + calc.apply(pots.q_hat_operator(), Z))) / norm_z
    logger.info(f"Factorization residuals: Q {res_q:.3e}, Q' {res_qp:.3e}, Qhat {res_qhat:.3e}")
    return res_q, res_qp, res_qhat


# ----------------------------------------------------------------------
# Maxwell <-> Dirac
# ----------------------------------------------------------------------

@dataclass
class BridgeResult:
    """
    Graded forms of one (E, H) pair and their residuals.

    Attributes:
        X: (0, *H | 0, E)
        Y: diag(mu^{1/2} even, eps^{1/2} odd) X
        dirac_residual: max of the 2-form and 1-form row norms of (P+V)X
        constraint_residual: norm of the 0-form and 3-form rows of (P+V)X
        rescaled_residual: ||(P+W)Y||
        maxwell_residual: max(||dE - i w mu *H||, ||dH + i w eps *E||)
    """
    X: GradedForm
    Y: GradedForm
    dirac_residual: float
    constraint_residual: float
    rescaled_residual: float
    maxwell_residual: float


def one_form(components: np.ndarray) -> GradedForm:
    form = GradedForm.zeros(components.shape[1:])
    form.data[5:8] = components
    return form


def maxwell_residual(E: np.ndarray, H: np.ndarray, m: MaterialPair, chart: ProductChart) -> Tuple[GradedForm, GradedForm]:
    """
    Maxwell residuals as 2-forms: dE - i w mu *H and dH + i w eps *E.

    Written with the chart star so that (cg, eps, mu) and
    (g, c^{1/2} eps, c^{1/2} mu) give identical residual fields.
    """
    calc = calculus_for(chart)
    e_form, h_form = one_form(E), one_form(H)
    star_e = calc.apply(calc.star, e_form)
    star_h = calc.apply(calc.star, h_form)
    first = calc.apply(calc.d, e_form) - star_h * (1j * m.omega * m.mu)
    second = calc.apply(calc.d, h_form) + star_e * (1j * m.omega * m.eps)
    return first.degree_part(2), second.degree_part(2)


def _rows_norm(calc, form: GradedForm, rows) -> float:
    part = GradedForm.zeros(form.grid_shape)
    part.data[list(rows)] = form.data[list(rows)]
    return calc.norm(part)


def maxwell_dirac_bridge(E: np.ndarray, H: np.ndarray, m: MaterialPair, chart: ProductChart,
                         potentials: Optional[Potentials] = None) -> BridgeResult:
    """
    Map 1-forms (E, H) to X = (0, *H | 0, E) and Y, with all residuals.

    Args:
        E, H: Orthonormal 1-form components, shape (3, N1, Nr, Ntheta)
    """
    pots = potentials or build_potentials(m, chart)
    calc = calculus_for(chart)
    X = GradedForm.zeros(chart.shape)
    X.data[1:4] = calc.apply(calc.star, one_form(H)).comp2
    X.data[5:8] = E
    Y = rescale_to_y(X, m)

    PX = calc.apply(calc.dirac, X) + pots.V.apply(X)
    PY = calc.apply(calc.dirac, Y) + pots.W.apply(Y)
    first, second = maxwell_residual(E, H, m, chart)
    return BridgeResult(
        X=X, Y=Y,
        dirac_residual=max(_rows_norm(calc, PX, (1, 2, 3)), _rows_norm(calc, PX, (5, 6, 7))),
        constraint_residual=_rows_norm(calc, PX, (0, 4)),
        rescaled_residual=calc.norm(PY),
        maxwell_residual=max(calc.norm(first), calc.norm(second)),
    )


def rescale_to_y(X: GradedForm, m: MaterialPair) -> GradedForm:
    Y = X.copy()
    Y.data[list(EVEN)] *= np.sqrt(m.mu)
    Y.data[list(ODD)] *= np.sqrt(m.eps)
    return Y


def rescale_to_x(Y: GradedForm, m: MaterialPair) -> GradedForm:
    X = Y.copy()
    X.data[list(EVEN)] /= np.sqrt(m.mu)
    X.data[list(ODD)] /= np.sqrt(m.eps)
    return X


def fields_from_x(X: GradedForm, chart: ProductChart) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of the bridge: (E, H) from X, using ** = 1."""
    calc = calculus_for(chart)
    star_h = GradedForm.zeros(chart.shape)
    star_h.data[1:4] = X.comp2
    return X.comp1.copy(), calc.apply(calc.star, star_h).comp1


# ----------------------------------------------------------------------
# Oracles and diagnostics
# ----------------------------------------------------------------------

def q_difference(m1: MaterialPair, m2: MaterialPair, chart: ProductChart) -> Tuple[np.ndarray, np.ndarray]:
    """
    q_alpha and q_beta by direct evaluation of their formulas.

        q_alpha = 1/2 Lap(a1 - a2) + 1/4 <da1, da1> - 1/4 <da2, da2> - w^2 (e1 m1 - e2 m2)
    """
    if m1.eps.shape != m2.eps.shape:
        raise PreconditionError("materials live on different grids")
    w2 = m1.omega**2
    source = w2 * (m1.eps * m1.mu - m2.eps * m2.mu)

    def q_of(f1, f2):
        g1, g2 = frame_gradient(f1, chart), frame_gradient(f2, chart)
        return (0.5 * scalar_laplacian(f1 - f2, chart) + 0.25 * bilinear_dot(g1, g1)
                - 0.25 * bilinear_dot(g2, g2) - source)

    return q_of(m1.alpha, m2.alpha), q_of(m1.beta, m2.beta)


def potential_difference(p1: Potentials, p2: Potentials) -> MatrixPotential:
    """Q1 - Q2 as a pointwise matrix field (compositional columns)."""
    return MatrixPotential(p1.Q.values - p2.Q.values, "Q1-Q2")


def w_difference(p1: Potentials, p2: Potentials, Y1: GradedForm, Y2: GradedForm) -> complex:
    """((W1 - W2) Y1 | Y2) by the interior quadrature."""
    calc = calculus_for(p1.chart)
    diff = MatrixPotential(p1.W.values - p2.W.values, "W1-W2")
    return calc.inner(diff.apply(Y1), Y2)
