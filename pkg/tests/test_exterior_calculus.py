import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from models.forms import GradedForm
from services.carleman import random_smooth_form
from services.exterior_calculus import (calculus_for, codifferential, dirac_boundary_defect, exterior_d,
                                        hodge_laplacian, hodge_star, ibp_residual, interior, pointwise_inner,
                                        wedge)
from services.forward_solver import integrate_boundary
from services.geometry import build_chart

seeds = st.integers(min_value=0, max_value=2**16)


def _random_form(seed, chart):
    rng = np.random.default_rng(seed)
    shape = (8,) + chart.shape
    return GradedForm(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@pytest.fixture(scope="module")
def flat_chart():
    return build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [7, 8, 6]})


@pytest.fixture(scope="module")
def conformal_chart():
    return build_chart({"surface": "perturbed_flat", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [7, 8, 6], "conformal": "1 + 0.1*x1**2"})


@given(seed=seeds)
@settings(max_examples=10, deadline=None)
def test_d_squared_vanishes(seed, flat_chart):
    calc = calculus_for(flat_chart)
    U = _random_form(seed, flat_chart)
    dU = exterior_d(U, flat_chart)
    assert calc.norm(exterior_d(dU, flat_chart)) <= 1e-11 * calc.norm(dU)


@given(seed=seeds)
@settings(max_examples=10, deadline=None)
def test_codifferential_squared_vanishes(seed, conformal_chart):
    calc = calculus_for(conformal_chart)
    U = _random_form(seed, conformal_chart)
    deltaU = codifferential(U, conformal_chart)
    assert calc.norm(codifferential(deltaU, conformal_chart)) <= 1e-11 * calc.norm(deltaU)


@given(seed=seeds)
@settings(max_examples=10, deadline=None)
def test_star_is_an_involution(seed, conformal_chart):
    U = _random_form(seed, conformal_chart)
    twice = hodge_star(hodge_star(U, conformal_chart), conformal_chart)
    assert np.allclose(twice.data, U.data, rtol=1e-13, atol=1e-13)


@given(seed=seeds)
@settings(max_examples=10, deadline=None)
def test_wedge_and_interior_are_adjoint(seed, flat_chart):
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((3,) + flat_chart.shape)
    U, V = _random_form(seed + 1, flat_chart), _random_form(seed + 2, flat_chart)
    lhs = np.sum(pointwise_inner(wedge(xi, U), V))
    rhs = np.sum(pointwise_inner(U, interior(xi, V)))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_wedge_with_itself_vanishes(disc_chart):
    rng = np.random.default_rng(0)
    xi = rng.standard_normal((3,) + disc_chart.shape)
    U = _random_form(1, disc_chart)
    assert np.max(np.abs(wedge(xi, wedge(xi, U)).data)) < 1e-12


def test_laplacian_of_polar_quadratic(disc_chart):
    # Lap r^2 = 4 in flat polar coordinates
    _, r, _ = disc_chart.mesh()
    lap = hodge_laplacian(GradedForm.scalar(r**2), disc_chart)
    assert np.allclose(lap.comp0, 4.0, atol=1e-10)
    assert np.max(np.abs(lap.data[1:])) < 1e-10


def test_compositional_and_assembled_laplacian_agree(disc_chart):
    calc = calculus_for(disc_chart)
    U = _random_form(5, disc_chart)
    assembled = calc.apply(calc.laplacian, U)
    assert np.allclose(hodge_laplacian(U, disc_chart).data, assembled.data, atol=1e-9)


def test_boundary_area_of_annular_cylinder(disc_chart):
    ones = {face.name: np.ones(disc_chart.shape)[face.index()] for face in disc_chart.faces()}
    # two annuli of area 2 pi plus cylinders of radius 0.5 and 1.5 and height 2
    assert np.isclose(integrate_boundary(ones, disc_chart).real, 12 * np.pi, rtol=1e-12)


def test_dirac_green_defect_shrinks_under_refinement():
    defects = []
    for n in (8, 16):
        chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                             "shape": [n, n, 8]})
        calc = calculus_for(chart)
        U, V = random_smooth_form(3, chart), random_smooth_form(4, chart)
        defects.append(dirac_boundary_defect(U, V, chart) / (calc.norm(U) * calc.norm(V)))
    assert defects[1] < 0.6 * defects[0]


def test_integration_by_parts_defect_shrinks_under_refinement():
    defects = []
    for n in (8, 16):
        chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                             "shape": [n, n, 8]})
        calc = calculus_for(chart)
        U, V = random_smooth_form(3, chart, degree=1), random_smooth_form(4, chart, degree=1)
        defects.append(ibp_residual(U, V, chart) / (calc.norm(U) * calc.norm(V)))
    assert defects[1] < 0.6 * defects[0]
