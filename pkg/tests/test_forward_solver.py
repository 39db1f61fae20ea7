import numpy as np
import pytest

from services.forward_solver import (MaxwellSolver, admittance, assemble_operator, boundary_values,
                                     field_trace, integrate_boundary, resonance_probe, surface_divergence,
                                     tangential_e_mask, trace_basis)
from services.geometry import boundary_regions, build_chart, rescale_materials
from services.reduction import materials_from_spec, maxwell_residual
from utils.errors import NearResonance, PreconditionError


@pytest.fixture
def small_chart():
    return build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [6, 6, 6]})


@pytest.fixture
def small_vacuum(small_chart):
    return materials_from_spec({"omega": 1.3}, small_chart)


def test_zero_data_gives_trivial_solution(small_chart, small_vacuum):
    gamma = boundary_regions(small_chart).gamma
    f = trace_basis(small_chart, gamma, 1)[0] * 0.0
    E, H, report = MaxwellSolver(small_vacuum, small_chart, check_resonance=False).solve(f)
    assert report.method == "trivial"
    assert not np.any(E) and not np.any(H)


def test_solution_carries_prescribed_tangential_trace(small_chart, small_vacuum):
    gamma = boundary_regions(small_chart).gamma
    f = trace_basis(small_chart, gamma, 2)[1]
    E, H, report = MaxwellSolver(small_vacuum, small_chart, check_resonance=False, tol=1e-6).solve(f)

    mask = tangential_e_mask(small_chart)
    assert np.array_equal(E[mask], boundary_values(f, small_chart)[mask])
    assert report.residual <= 1e-6
    assert np.any(H)


def test_trace_basis_stays_inside_region(small_chart):
    gamma = boundary_regions(small_chart).gamma
    basis = trace_basis(small_chart, gamma, 2)
    assert len(basis) == 2
    for f in basis:
        for face in small_chart.faces():
            outside = ~gamma.mask[face.index()]
            assert not np.any(f.faces[face.name][:, outside])


def test_unattainable_threshold_raises_near_resonance(small_chart, small_vacuum):
    with pytest.raises(NearResonance):
        MaxwellSolver(small_vacuum, small_chart, threshold=1.0)


def test_admittance_rejects_traces_outside_gamma1(small_chart, small_vacuum):
    regions = boundary_regions(small_chart)
    basis = trace_basis(small_chart, regions.gamma, 1)
    with pytest.raises(PreconditionError):
        admittance(small_vacuum, regions.front.front, regions.gamma, basis, small_chart, check_resonance=False)


def test_admittance_outputs_live_on_gamma2(small_chart, small_vacuum):
    regions = boundary_regions(small_chart)
    basis = trace_basis(small_chart, regions.gamma, 2)
    records = admittance(small_vacuum, regions.gamma, regions.f1, basis, small_chart,
                         check_resonance=False, tol=1e-6)
    assert len(records) == 2
    for record in records:
        for face in small_chart.faces():
            outside = ~regions.f1.mask[face.index()]
            assert not np.any(record.output.faces[face.name][:, outside])


def test_resonance_probe_reports_every_frequency(small_chart, small_vacuum):
    curve = resonance_probe(small_vacuum, [1.0, 1.3, 1.6], small_chart)
    rows = curve.to_rows()
    assert [row["omega"] for row in rows] == [1.0, 1.3, 1.6]
    assert all(0.0 <= row["sigma_ratio"] <= 1.0 for row in rows)


def test_solve_enforces_maxwell_rows_to_tolerance(small_chart, small_vacuum):
    gamma = boundary_regions(small_chart).gamma
    f = trace_basis(small_chart, gamma, 3)[2]
    solver = MaxwellSolver(small_vacuum, small_chart, check_resonance=False)
    E, H, report = solver.solve(f)
    assert report.residual <= solver.tol
    assert report.maxwell_residual <= solver.tol
    assert report.succeeded(solver.tol)


def test_magnetic_constraint_rows_vanish(small_chart, small_vacuum):
    gamma = boundary_regions(small_chart).gamma
    f = trace_basis(small_chart, gamma, 1)[0]
    E, H, _ = MaxwellSolver(small_vacuum, small_chart, check_resonance=False).solve(f)

    rows = assemble_operator(small_vacuum, small_chart) @ np.concatenate([E.reshape(-1), H.reshape(-1)])
    n = small_chart.size
    first, magnetic = rows[:3 * n], rows[-n:]
    scale = np.abs(E).max()
    assert np.abs(first).max() <= 1e-9 * scale
    assert np.abs(magnetic).max() <= 1e-9 * scale


def test_forward_map_is_linear(small_chart, small_vacuum):
    gamma = boundary_regions(small_chart).gamma
    f1, f2 = trace_basis(small_chart, gamma, 2)
    solver = MaxwellSolver(small_vacuum, small_chart, check_resonance=False)
    E1, H1, _ = solver.solve(f1)
    E2, H2, _ = solver.solve(f2)
    E, H, _ = solver.solve(f1 + f2 * 2.0)

    assert np.allclose(E, E1 + 2.0 * E2, rtol=0, atol=1e-10 * np.abs(E).max())
    assert np.allclose(H, H1 + 2.0 * H2, rtol=0, atol=1e-10 * np.abs(H).max())


def test_conformal_factor_moves_into_materials():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6], "conformal": "1 + 0.1*x1**2"})
    m = materials_from_spec({"omega": 1.3, "eps": "1 + 0.1*r"}, chart)
    base, rescaled = rescale_materials(chart, m)
    regions = boundary_regions(chart)
    basis = trace_basis(chart, regions.gamma, 2)

    conformal_records = admittance(m, regions.gamma, regions.f1, basis, chart, check_resonance=False)
    flat_records = admittance(rescaled, regions.gamma, regions.f1, basis, base, check_resonance=False)
    for a, b in zip(conformal_records, flat_records):
        assert a.distance(b) <= 1e-9
        assert np.isclose(a.report.maxwell_residual, b.report.maxwell_residual, rtol=0, atol=1e-12)

    E_c, H_c, _ = MaxwellSolver(m, chart, check_resonance=False).solve(basis[0])
    E_g, H_g, _ = MaxwellSolver(rescaled, base, check_resonance=False).solve(basis[0])
    for rc, rg in zip(maxwell_residual(E_c, H_c, m, chart), maxwell_residual(E_g, H_g, rescaled, base)):
        assert np.allclose(rc.data, rg.data, rtol=0, atol=1e-10 * np.abs(E_c).max())


def _plane_wave(chart, omega):
    """Vacuum plane wave E = p e^{ik.x}, H = k x p / omega in (x1, r, theta) frame components."""
    k = omega * np.array([0.6, 0.0, 0.8])
    p = np.array([0.0, 1.0, 0.0])
    q = np.cross(k, p) / omega
    coords = chart.physical_coordinates()
    theta = coords["theta"]
    phase = np.exp(1j * (k[0] * coords["x"] + k[1] * coords["y"] + k[2] * coords["z"]))

    def frame(v):
        return np.stack([v[2] * np.ones_like(theta),
                         v[0] * np.cos(theta) + v[1] * np.sin(theta),
                         -v[0] * np.sin(theta) + v[1] * np.cos(theta)]) * phase

    return frame(p), frame(q)


@pytest.mark.slow
def test_plane_wave_converges_at_second_order():
    e_errors, h_errors = [], []
    for shape in ([9, 9, 16], [17, 17, 32]):
        chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                             "shape": shape})
        m = materials_from_spec({"omega": 1.3}, chart)
        E_exact, H_exact = _plane_wave(chart, m.omega)
        E, H, report = MaxwellSolver(m, chart, check_resonance=False, tol=1e-8).solve(field_trace(E_exact, chart))
        assert report.maxwell_residual <= 1e-8
        e_errors.append(np.linalg.norm(E - E_exact) / np.linalg.norm(E_exact))
        h_errors.append(np.linalg.norm(H - H_exact) / np.linalg.norm(H_exact))

    assert np.log2(e_errors[0] / e_errors[1]) >= 1.5
    assert e_errors[1] <= 0.1
    assert h_errors[1] < h_errors[0]


def test_surface_divergence_integrates_to_zero_on_closed_boundary():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [13, 13, 24]})
    coords = chart.physical_coordinates()
    x1, r, theta = coords["x1"], coords["r"], coords["theta"]
    field = np.stack([np.sin(x1) * r, np.cos(r * x1) + np.sin(theta), np.exp(0.5 * x1) * np.cos(theta)])

    div = surface_divergence(field_trace(field, chart), chart)
    total = integrate_boundary(div, chart)
    size = integrate_boundary({name: np.abs(v) for name, v in div.items()}, chart).real
    assert size > 0
    assert abs(total) <= 0.02 * size
