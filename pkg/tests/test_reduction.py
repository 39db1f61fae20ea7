import numpy as np
import pytest

from models.materials import MaterialPair
from services.carleman import random_smooth_form
from services.geometry import build_chart
from services.reduction import (build_potentials, check_boundary_agreement, explicit_q_entries,
                                factorization_residual, fields_from_x, materials_from_spec,
                                maxwell_dirac_bridge, q_difference, rescale_to_x, rescale_to_y,
                                transpose_potential_w)
from utils.errors import BoundaryAgreementViolated, ConfigInvalid, MaterialError, PreconditionError


def test_material_block_needs_omega(disc_chart):
    with pytest.raises(ConfigInvalid):
        materials_from_spec({"eps": "2"}, disc_chart)


@pytest.mark.parametrize("eps, mu, omega", [
    ([-1.0, 1.0], [1.0, 1.0], 1.0),
    ([1.0, 1.0], [1.0, 0.0], 1.0),
    ([1.0, 1.0], [1.0, 1.0], 0.0),
    ([1.0, 1.0], [1.0], 1.0),
])
def test_invalid_material_pairs(eps, mu, omega):
    with pytest.raises(MaterialError):
        MaterialPair(np.array(eps), np.array(mu), omega)


def test_kappa_of_constant_materials(disc_chart):
    m = materials_from_spec({"omega": 2.0, "eps": "4", "mu": "1"}, disc_chart)
    assert np.allclose(m.kappa, 4.0)


def test_boundary_agreement(disc_chart, vacuum):
    check_boundary_agreement(vacuum, vacuum, disc_chart)
    denser = materials_from_spec({"omega": 1.3, "eps": "2"}, disc_chart)
    with pytest.raises(BoundaryAgreementViolated):
        check_boundary_agreement(vacuum, denser, disc_chart)


def test_constant_materials_give_scalar_potential(disc_chart):
    m = materials_from_spec({"omega": 1.3, "eps": "2", "mu": "1.5"}, disc_chart)
    pots = build_potentials(m, disc_chart)
    kappa2 = 1.3**2 * 3.0
    expected = -kappa2 * np.eye(8)[:, :, None, None, None] * np.ones(disc_chart.shape)
    assert np.allclose(pots.Q.values, expected, atol=1e-9)
    assert np.allclose(pots.Qprime.values, expected, atol=1e-9)
    assert np.allclose(explicit_q_entries(m, disc_chart)["Q00"], -kappa2)


def test_factorizations_hold_for_constant_materials(disc_chart, vacuum):
    Z = random_smooth_form(7, disc_chart)
    assert max(factorization_residual(vacuum, Z, disc_chart)) <= 1e-9


def test_transpose_potential_matches_transposed_w(disc_chart, bump_material):
    pots = build_potentials(bump_material, disc_chart)
    assert np.allclose(transpose_potential_w(bump_material, disc_chart).values, pots.W.transpose().values,
                       atol=1e-12)


def test_potentials_need_unit_conformal_factor():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6], "conformal": "1 + 0.1*x1**2"})
    m = materials_from_spec({"omega": 1.0}, chart)
    with pytest.raises(PreconditionError):
        build_potentials(m, chart)


def test_bridge_round_trip(disc_chart, bump_material):
    rng = np.random.default_rng(11)
    shape = (3,) + disc_chart.shape
    E = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    H = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    bridge = maxwell_dirac_bridge(E, H, bump_material, disc_chart)

    E_back, H_back = fields_from_x(bridge.X, disc_chart)
    assert np.array_equal(E_back, E)
    assert np.allclose(H_back, H, atol=1e-13)
    assert np.allclose(rescale_to_x(rescale_to_y(bridge.X, bump_material), bump_material).data, bridge.X.data)
    assert np.allclose(bridge.Y.data, rescale_to_y(bridge.X, bump_material).data)


def test_q_difference_of_equal_materials_is_zero(disc_chart, bump_material):
    qa, qb = q_difference(bump_material, bump_material, disc_chart)
    assert not np.any(qa) and not np.any(qb)


def test_q_difference_needs_matching_grids(disc_chart, fine_disc_chart):
    m1 = materials_from_spec({"omega": 1.0}, disc_chart)
    m2 = materials_from_spec({"omega": 1.0}, fine_disc_chart)
    with pytest.raises(PreconditionError):
        q_difference(m1, m2, disc_chart)


def test_explicit_q_entries_for_exponential_materials():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [8, 8, 6]})
    m = materials_from_spec({"omega": 1.3, "eps": "exp(x1)", "mu": "exp(0.5*r)"}, chart)
    x1, r, _ = chart.mesh()
    kappa2 = 1.3**2 * np.exp(x1 + 0.5 * r)
    # alpha = x1, beta = r/2: |d alpha|^2 = 1, |d beta|^2 = 1/4, Lap alpha = 0, Lap beta = 1/(2r)
    q = explicit_q_entries(m, chart)
    assert np.allclose(q["Q00"], -kappa2 + 0.25, atol=1e-9)
    assert np.allclose(q["Q44"], -kappa2 + 0.25 / r + 0.0625, atol=1e-9)
    assert np.allclose(q["Qp00"], -kappa2 - 0.25 / r + 0.0625, atol=1e-9)
    assert np.allclose(q["Qp44"], -kappa2 + 0.25, atol=1e-9)


@pytest.mark.slow
def test_factorization_residual_is_second_order_for_variable_materials():
    residuals = []
    for n in (11, 21):
        chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                             "shape": [n, n, 8]})
        m = materials_from_spec({"omega": 1.3, "eps": "1 + 0.3*x1", "mu": "1 + 0.2*r"}, chart)
        residuals.append(np.array(factorization_residual(m, random_smooth_form(7, chart, degree=1), chart)))
    slopes = np.log2(residuals[0] / residuals[1])
    assert np.all(slopes >= 1.8)
