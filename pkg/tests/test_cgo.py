import numpy as np
import pytest

from models.records import CgoConfig
from services.carleman import random_smooth_form
from services.cgo import (build_amplitude, build_cgo_pair, cgo_sweep, conjugated_apply, decay_slope,
                          eikonal_transport_residuals, solve_remainder, transport_amplitudes)
from services.geometry import boundary_regions, build_chart
from services.reduction import build_potentials, materials_from_spec
from utils.errors import PreconditionError, ResolutionExceeded


@pytest.mark.parametrize("tau, lam, b, b_r", [
    (0.0, 0.0, (1.0,), (1.0,)),
    (1.0, -0.5, (1.0,), (1.0,)),
    (1.0, 0.0, (1.0, 0.5), (1.0,)),
    (1.0, 0.0, (1.0,), (0.5, 1.0)),
])
def test_invalid_cgo_configs(tau, lam, b, b_r):
    with pytest.raises(PreconditionError):
        CgoConfig(tau=tau, lam=lam, b=b, b_r=b_r)


def test_unknown_flavor():
    with pytest.raises(PreconditionError):
        CgoConfig(tau=1.0, flavor="c")


@pytest.mark.parametrize("fixture", ["disc_chart", "cap_chart"])
def test_eikonal_and_transport_hold(fixture, request):
    chart = request.getfixturevalue(fixture)
    cfg = CgoConfig(tau=1.0, b=(0.3, 1.0, -0.2j))
    assert max(eikonal_transport_residuals(chart, cfg)) <= 1e-10


def test_unresolved_tau_is_rejected(disc_chart):
    with pytest.raises(ResolutionExceeded):
        build_amplitude(CgoConfig(tau=10.0, lam=0.5), disc_chart)


def test_amplitude_needs_unit_conformal_factor():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6], "conformal": "4"})
    with pytest.raises(PreconditionError):
        build_amplitude(CgoConfig(tau=1.0), chart)


def test_expanded_and_factored_conjugation_agree(disc_chart, bump_material):
    Q = build_potentials(bump_material, disc_chart).Q
    Z = random_smooth_form(2, disc_chart)
    for sign in (-1, 1):
        expanded = conjugated_apply(Z, 1.5, sign, Q, disc_chart, "expanded")
        factored = conjugated_apply(Z, 1.5, sign, Q, disc_chart, "factored")
        scale = np.max(np.abs(expanded.data))
        assert np.max(np.abs(expanded.data - factored.data)) <= 1e-9 * scale


def test_unknown_conjugation_path(disc_chart):
    with pytest.raises(ValueError):
        conjugated_apply(random_smooth_form(0, disc_chart), 1.0, 1, None, disc_chart, "spectral")


def test_type_a_remainder_solves_interior_equation(fine_disc_chart):
    m = materials_from_spec({"omega": 1.3}, fine_disc_chart)
    cfg = CgoConfig(tau=2.0, lam=0.5)
    A = build_amplitude(cfg, fine_disc_chart)
    R, report = solve_remainder(A, cfg, m, None, fine_disc_chart)
    assert report.residual <= 1e-6
    assert report.flavor == "a"
    assert R.data.shape == A.data.shape


def test_type_b_remainder_vanishes_on_gamma(fine_disc_chart):
    m = materials_from_spec({"omega": 1.3}, fine_disc_chart)
    gamma = boundary_regions(fine_disc_chart).gamma
    cfg = CgoConfig(tau=2.0, flavor="b")
    _, report = solve_remainder(build_amplitude(cfg, fine_disc_chart), cfg, m, gamma, fine_disc_chart)
    assert report.boundary_trace <= 1e-8
    assert report.residual <= 1e-6


def test_type_b_remainder_needs_gamma(disc_chart, vacuum):
    cfg = CgoConfig(tau=1.0, flavor="b")
    with pytest.raises(PreconditionError):
        solve_remainder(build_amplitude(cfg, disc_chart), cfg, vacuum, None, disc_chart)


@pytest.mark.parametrize("cfg_a, cfg_b", [
    (CgoConfig(tau=1.0, lam=0.5), CgoConfig(tau=2.0, flavor="b")),
    (CgoConfig(tau=1.0, lam=0.0), CgoConfig(tau=1.0, flavor="b")),
    (CgoConfig(tau=1.0, flavor="b"), CgoConfig(tau=1.0, lam=0.5)),
])
def test_cgo_pair_preconditions(cfg_a, cfg_b, disc_chart, vacuum):
    gamma = boundary_regions(disc_chart).gamma
    with pytest.raises(PreconditionError):
        build_cgo_pair(vacuum, vacuum, cfg_a, cfg_b, gamma, disc_chart)


def test_amplitude_mode_pair_skips_remainders(disc_chart, vacuum):
    gamma = boundary_regions(disc_chart).gamma
    pair = build_cgo_pair(vacuum, vacuum, CgoConfig(tau=1.0, lam=0.5), CgoConfig(tau=1.0, flavor="b"),
                          gamma, disc_chart, mode="amplitude")
    assert pair.reports == {}
    assert np.any(pair.z1.data) and np.any(pair.y.data)


def test_decay_slope_of_power_law():
    taus = [2.0, 4.0, 8.0, 16.0]
    assert np.isclose(decay_slope(taus, [t**-1.5 for t in taus]), -1.5)
    assert np.isnan(decay_slope([2.0], [1.0]))


def test_sweep_needs_a_resolved_tau(disc_chart, vacuum):
    with pytest.raises(PreconditionError):
        cgo_sweep(CgoConfig(tau=1.0, lam=0.5), vacuum, None, disc_chart, [50.0, 80.0])


def test_radial_amplitude_uses_its_own_coefficients(disc_chart):
    cfg = CgoConfig(tau=1.0, b=(1.0,), b_r=(0.5, 2.0, 1j))
    _, _, theta = disc_chart.mesh()
    amps = transport_amplitudes(cfg, disc_chart)

    expected = disc_chart.m ** -0.25 * (0.5 * np.exp(-1j * theta) + 2.0 + 1j * np.exp(1j * theta))
    assert np.allclose(amps["a_r"], expected)
    assert not np.allclose(amps["a_r"], amps["a"])
    assert max(eikonal_transport_residuals(disc_chart, cfg)) <= 1e-10


def test_conjugated_operator_stays_bounded_on_the_amplitude():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [24, 24, 8]})
    m = materials_from_spec({"omega": 1.3}, chart)
    Q = build_potentials(m, chart).Q
    core = (slice(None), slice(2, -2), slice(2, -2), slice(None))

    ratios = []
    for tau in (1.0, 2.0, 3.0):
        A = build_amplitude(CgoConfig(tau=tau, lam=0.5), chart)
        out = conjugated_apply(A, tau, -1, Q, chart)
        ratios.append(np.linalg.norm(out.data[core]) / np.linalg.norm(A.data[core]))
    # the tau^2 and tau terms cancel on the amplitude
    assert max(ratios) <= 1.5 * min(ratios)
    assert ratios[-1] <= 0.5 * 3.0**2


@pytest.mark.slow
def test_type_a_remainders_decay_with_tau(fine_disc_chart):
    m = materials_from_spec({"omega": 1.3}, fine_disc_chart)
    sweep = cgo_sweep(CgoConfig(tau=1.0, lam=0.5), m, None, fine_disc_chart, [1.0, 2.0])

    norms = [r.remainder_norm for r in sweep.reports]
    assert sweep.taus == [1.0, 2.0]
    assert np.isclose(sweep.slope, decay_slope(sweep.taus, norms))
    assert all(r.residual <= 1e-6 for r in sweep.reports)
    assert sweep.slope < -0.25
