import numpy as np
import pytest

from services.geometry import (boundary_regions, build_chart, build_surface, check_gamma, conformal_rescale,
                               front_face, geodesic_trace, log_polar_coordinates, log_polar_euclidean_chart,
                               region_from_mask, resolvable_tau_window)
from utils.errors import (ConfigInvalid, DomainTouchesPole, GammaSignViolation, NonpositiveConformalFactor,
                          PreconditionError)


def test_unknown_surface_is_invalid():
    with pytest.raises(ConfigInvalid):
        build_surface("torus")


@pytest.mark.parametrize("spec", [
    {"surface": "flat_disc", "r_range": [0.5, 1.5], "shape": [6, 6, 6]},
    {"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.0, 1.0], "shape": [6, 6, 6]},
    {"surface": "planar", "x1_range": [-1, 1], "r_range": [0, 1], "shape": [6, 6, 6]},
])
def test_bad_chart_specs(spec):
    with pytest.raises(ConfigInvalid):
        build_chart(spec)


def test_chart_hash_is_stable_and_shape_sensitive(disc_chart):
    same = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [10, 10, 8]})
    other = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [10, 10, 9]})
    assert same.chart_hash == disc_chart.chart_hash
    assert other.chart_hash != disc_chart.chart_hash


def test_quadrature_integrates_annulus_volume(disc_chart):
    # x1 in [-1, 1] times the annulus 0.5 < r < 1.5
    volume = disc_chart.quadrature_weights().sum()
    assert np.isclose(volume, 2 * np.pi * (1.5**2 - 0.5**2), rtol=1e-12)


def test_geodesic_trace_reaches_exit_radius():
    surface = build_surface("spherical_cap", r_max=1.2)
    geo = geodesic_trace(surface, 0.7, 0.05)
    assert geo.r[0] == 0.0
    assert 1.2 - 0.05 < geo.r[-1] <= 1.2 + 1e-12
    assert np.allclose(np.diff(geo.arclength), 0.05)


@pytest.mark.parametrize("theta0, step, h_r", [(0.5, 0.2, 0.1), (7.0, 0.05, None), (0.5, 0.0, None)])
def test_geodesic_preconditions(theta0, step, h_r):
    with pytest.raises(PreconditionError):
        geodesic_trace(build_surface("flat_disc"), theta0, step, h_r=h_r)


def test_boundary_regions_are_nested(disc_chart):
    regions = boundary_regions(disc_chart)
    front, f1, gamma = regions.front.front.mask, regions.f1.mask, regions.gamma.mask
    enlarged = regions.front.enlarged.mask

    assert gamma.any()
    assert not np.any(front & ~f1)
    assert not np.any(f1 & ~enlarged)
    assert not np.any(gamma & f1)
    assert np.array_equal(gamma | f1, regions.boundary)
    # Gamma only lives on the x1 = x1_min face
    assert not gamma[1:].any()


def test_front_face_contains_x1_max_and_radial_faces(disc_chart):
    ff = front_face(disc_chart)
    assert ff.front.mask[-1].all()
    # edges with x1_min have an averaged normal pointing against dx1
    assert ff.front.mask[1:, 0].all() and ff.front.mask[1:, -1].all()
    assert not ff.front.mask[0].any()
    assert np.all(ff.products[ff.complement.mask] < 0)


def test_gamma_check_rejects_front_samples(disc_chart):
    mask = np.zeros(disc_chart.shape, dtype=bool)
    mask[-1] = True
    with pytest.raises(GammaSignViolation):
        check_gamma(disc_chart, region_from_mask(disc_chart, "bad", mask))


def test_f1_must_stay_inside_enlarged_front(disc_chart):
    with pytest.raises(PreconditionError):
        boundary_regions(disc_chart, f1_cells=2, enlarge=2)


def test_resolvable_tau_window_drops_large_tau(disc_chart):
    h = max(disc_chart.spacings[:2])
    assert resolvable_tau_window(disc_chart, [1.0, 0.4 / h, 0.6 / h], 0.5) == [1.0, 0.4 / h]


def test_conformal_rescale_moves_factor_into_materials():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6], "conformal": "4"})
    assert not chart.is_conformally_flat
    base, eps, mu = conformal_rescale(chart, np.ones(chart.shape), 3 * np.ones(chart.shape))
    assert base.is_conformally_flat
    assert np.allclose(eps, 2.0) and np.allclose(mu, 6.0)


def test_nonpositive_conformal_factor():
    chart = build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                         "shape": [6, 6, 6], "conformal": "x1"})
    with pytest.raises(NonpositiveConformalFactor):
        conformal_rescale(chart, np.ones(chart.shape), np.ones(chart.shape))


def test_log_polar_coordinates():
    y1, direction = log_polar_coordinates(np.array([[0.0, 0.0, 2.0]]), orientation=-1)
    assert np.isclose(y1[0], -np.log(2.0))
    assert np.allclose(direction[0], [0.0, 0.0, 1.0])
    with pytest.raises(DomainTouchesPole):
        log_polar_coordinates(np.zeros((1, 3)))


def test_ball_touching_pole_is_rejected():
    with pytest.raises(DomainTouchesPole):
        log_polar_euclidean_chart([0.0, 0.0, 0.5], 1.0, (6, 6, 6))


def test_log_polar_chart_of_ball_has_front_face():
    chart, ball = log_polar_euclidean_chart([0.0, 0.0, 3.0], 1.0, (12, 12, 12))
    x, y, z = chart.embedding.to_physical(*chart.mesh())
    assert np.allclose(chart.c, x**2 + y**2 + z**2)
    assert np.all(z > 0)

    ff = front_face(chart, ball)
    assert ff.front.count > 0 and ff.complement.count > 0
    normal = ff.front.normal
    dot = x * normal[0] + y * normal[1] + z * normal[2]
    assert np.all(dot[ff.front.mask] <= 0)
    assert np.all(dot[ff.complement.mask] > 0)


def test_ball_on_the_x3_plane_is_rejected():
    with pytest.raises(DomainTouchesPole):
        log_polar_euclidean_chart([2.0, 0.0, 0.0], 1.0, (6, 6, 6))


@pytest.mark.parametrize("center", [[0.0, 0.0, 2.0], [1.2, 0.0, 1.6]])
def test_front_face_matches_pointwise_sign_of_x_dot_nu(center):
    # unit ball at distance 2 from x0 = 0, the (2, 0, 0) configuration rotated into x3 > 0
    chart, ball = log_polar_euclidean_chart(center, 1.0, (14, 14, 14))
    ff = front_face(chart, ball)
    boundary = ff.front.mask | ff.complement.mask
    assert not np.any(ff.front.mask & ff.complement.mask)

    x, y, z = chart.embedding.to_physical(*chart.mesh())
    c = np.asarray(center)
    offset = np.stack([x - c[0], y - c[1], z - c[2]])
    nu = offset / np.linalg.norm(offset, axis=0)
    dot = x * nu[0] + y * nu[1] + z * nu[2]
    oracle = boundary & (dot <= 0)

    decided = boundary & (np.abs(dot) > 1e-12)
    assert np.array_equal(ff.front.mask[decided], oracle[decided])
    # far cap: front samples sit closer to x0 than the center does
    assert np.all(np.linalg.norm(np.stack([x, y, z]), axis=0)[ff.front.mask] <= np.linalg.norm(c) + 1e-9)
    assert ff.front.count > 0 and ff.complement.count > 0
