import numpy as np
import pytest

from models.forms import GradedForm
from services.carleman import (admissible_test_form, carleman_sample, carleman_scan, conjugated_q_hat, cutoff,
                               estimate_terms, gamma_condition_residual, term_slopes)
from services.exterior_calculus import calculus_for
from services.geometry import boundary_regions, build_chart
from services.reduction import build_potentials
from utils.errors import DegenerateSample, PreconditionError


def test_cutoff_vanishes_on_outer_layers(disc_chart):
    chi = cutoff(disc_chart, layers=3)
    assert not chi[:3].any() and not chi[-3:].any()
    assert not chi[:, :3].any() and not chi[:, -3:].any()
    assert chi.max() <= 1.0 and chi[5, 5].min() > 0


def test_open_cutoff_reaches_low_x1_face(disc_chart):
    chi = cutoff(disc_chart, layers=3, open_low_x1=True)
    assert chi[0].any()
    assert not chi[-3:].any()


def test_cutoff_needs_room():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6]})
    with pytest.raises(PreconditionError):
        cutoff(chart)


def test_interior_forms_have_no_boundary_terms(disc_chart):
    u = admissible_test_form(4, None, disc_chart)
    terms = estimate_terms(u, 2.0, disc_chart)
    assert terms[0] > 0 and terms[1] > 0
    assert max(terms[2:]) <= 1e-12 * terms[0]


def test_zero_form_is_degenerate(disc_chart, vacuum):
    operator = conjugated_q_hat(1.0, calculus_for(disc_chart), build_potentials(vacuum, disc_chart))
    with pytest.raises(DegenerateSample):
        carleman_sample(GradedForm.zeros(disc_chart.shape), 1.0, disc_chart, operator)


def test_gamma_family_satisfies_boundary_condition(disc_chart, bump_material):
    gamma = boundary_regions(disc_chart).gamma
    potentials = build_potentials(bump_material, disc_chart)
    u = admissible_test_form(9, gamma, disc_chart, "gamma", 1.5, potentials)
    assert gamma_condition_residual(u, 1.5, gamma, disc_chart, potentials) <= 1e-8


def test_gamma_family_needs_potentials(disc_chart):
    gamma = boundary_regions(disc_chart).gamma
    with pytest.raises(PreconditionError):
        admissible_test_form(0, gamma, disc_chart, "gamma")


def test_scan_fits_constant_over_all_samples(disc_chart, vacuum):
    gamma = boundary_regions(disc_chart).gamma
    scan = carleman_scan(2, [1.0, 2.0], vacuum, gamma, disc_chart, workers=2)

    assert len(scan.samples) == 4
    assert all(scan.fitted_c >= s.ratio for s in scan.samples)
    assert scan.stability >= 1.0
    assert scan.verdict in ("PASS", "FAIL")
    assert set(scan.term_slopes) == {"lhs", "rhs", "ratio"}


def test_interior_slopes_come_from_both_samples(disc_chart, vacuum):
    gamma = boundary_regions(disc_chart).gamma
    slopes = term_slopes(3, 1.0, gamma, disc_chart, build_potentials(vacuum, disc_chart))

    assert set(slopes) == {"lhs", "rhs", "ratio"}
    # tau||u|| + ||grad u|| with a fixed u grows slower than tau
    assert 0.0 < slopes["lhs"] < 1.0
    assert np.isclose(slopes["ratio"], slopes["lhs"] - slopes["rhs"], atol=1e-12)


def test_gamma_slopes_include_each_term(disc_chart, bump_material):
    gamma = boundary_regions(disc_chart).gamma
    slopes = term_slopes(9, 1.0, gamma, disc_chart, build_potentials(bump_material, disc_chart), "gamma")

    assert {"lhs", "rhs", "ratio", "tau_u", "grad_u"} <= set(slopes)
    assert np.isclose(slopes["ratio"], slopes["lhs"] - slopes["rhs"], atol=1e-12)
    assert all(np.isfinite(v) for v in slopes.values())


def test_ratios_are_scale_invariant(disc_chart, bump_material):
    gamma = boundary_regions(disc_chart).gamma
    potentials = build_potentials(bump_material, disc_chart)
    operator = conjugated_q_hat(1.5, calculus_for(disc_chart), potentials)
    for family in ("interior", "gamma"):
        u = admissible_test_form(5, gamma, disc_chart, family, 1.5, potentials)
        base = carleman_sample(u, 1.5, disc_chart, operator, family=family)
        scaled = carleman_sample(u * 5.0, 1.5, disc_chart, operator, family=family)
        assert np.isclose(scaled.ratio, base.ratio, rtol=1e-12)
        assert np.allclose(scaled.terms, 5.0 * np.asarray(base.terms), rtol=1e-12)
