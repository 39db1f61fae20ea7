import numpy as np
import pytest

from services.ray_transform import (adjoint_ray_transform, attenuated_ray_transform, build_ray_geometry,
                                    fourier_x1_recover, invert_ray_transform, moment_kernel)
from services.recovery import cosine_similarity
from utils.errors import GeometryMismatch, IllPosedSampling, PreconditionError


@pytest.fixture(scope="module")
def flat_geometry():
    return build_ray_geometry("flat_disc", n=24, n_centers=8, n_angles=16)


def test_flat_chords_match_closed_form(flat_geometry):
    offsets = flat_geometry.angles - (2 * np.pi * np.arange(8) / 8 + np.pi)[:, None]
    expected = 2 * np.sqrt(1 - (1.2 * np.sin(offsets)) ** 2)
    assert np.allclose(flat_geometry.lengths, expected, atol=1e-10)


def test_unit_field_without_attenuation_gives_chord_lengths(flat_geometry):
    sino = attenuated_ray_transform(lambda x, y: np.ones_like(x), [0.0], flat_geometry)
    assert np.allclose(sino.values[..., 0], flat_geometry.lengths, atol=1e-12)


def test_attenuation_only_decreases_positive_data(flat_geometry):
    sino = attenuated_ray_transform(lambda x, y: np.ones_like(x), [0.0, 1.0], flat_geometry)
    hit = flat_geometry.lengths > 0
    assert np.all(sino.values[..., 1][hit] < sino.values[..., 0][hit])


def test_adjoint_is_exact(flat_geometry):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((24, 24)) * flat_geometry.mask
    forward = attenuated_ray_transform(f, [0.7], flat_geometry)
    s = forward.with_values(rng.standard_normal(forward.values.shape))
    lhs = np.vdot(s.values[..., 0], forward.values[..., 0])
    rhs = np.vdot(adjoint_ray_transform(s, 0.7, flat_geometry), f)
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_mismatched_sinograms_are_rejected(flat_geometry):
    sino = attenuated_ray_transform(np.ones((24, 24)), [0.5], flat_geometry)
    with pytest.raises(GeometryMismatch):
        adjoint_ray_transform(sino, 1.0, flat_geometry)
    other = build_ray_geometry("flat_disc", n=24, n_centers=8, n_angles=12)
    with pytest.raises(GeometryMismatch):
        invert_ray_transform(sino, 0.5, other)
    with pytest.raises(GeometryMismatch):
        attenuated_ray_transform(np.ones((10, 10)), [0.5], flat_geometry)


@pytest.mark.parametrize("kwargs", [{"center_radius": 1.0}, {"surface": "torus"},
                                    {"surface": "spherical_cap", "cap_radius": 2.0}])
def test_ray_geometry_preconditions(kwargs):
    with pytest.raises(PreconditionError):
        build_ray_geometry(**{"n": 8, "n_centers": 2, "n_angles": 2, **kwargs})


def test_cap_geodesics_through_the_middle_meet_the_disc():
    cap = build_ray_geometry("spherical_cap", n=16, n_centers=4, n_angles=8, cap_radius=1.0)
    assert np.all(cap.lengths[:, 3:5] > 0)
    assert np.all(np.isfinite(cap.sample_xy))


@pytest.mark.slow
def test_inversion_recovers_smooth_field():
    geometry = build_ray_geometry("flat_disc", n=32, n_centers=32, n_angles=48)
    x, y = np.meshgrid(geometry.grid, geometry.grid, indexing="ij")
    truth = np.exp(-8 * (x**2 + y**2)) * geometry.mask
    sino = attenuated_ray_transform(truth, [0.5], geometry)
    result = invert_ray_transform(sino, 0.5, geometry)
    error = np.linalg.norm(result.field - truth) / np.linalg.norm(truth)
    assert error <= 0.3
    assert result.data_residual < 0.1


def test_moment_centers_need_a_flat_surface(cap_chart):
    with pytest.raises(PreconditionError):
        moment_kernel(cap_chart, 1.0, np.ones_like, center=(0.0, 0.0))


def test_zero_moments_recover_zero_field(disc_chart):
    kernels = np.stack([moment_kernel(disc_chart, lam, lambda th, k=k: np.exp(1j * k * th))
                        for lam in (0.5, 1.0) for k in (-1, 0, 1)])
    result = fourier_x1_recover(kernels, np.zeros(6), disc_chart)
    assert not np.any(result.field)
    assert result.rank > 0


def test_degenerate_design_is_ill_posed(disc_chart):
    with pytest.raises(IllPosedSampling):
        fourier_x1_recover(np.zeros((4,) + disc_chart.shape), np.ones(4), disc_chart)


def test_inversion_is_linear_in_the_data(flat_geometry):
    rng = np.random.default_rng(3)
    f1 = rng.standard_normal((24, 24)) * flat_geometry.mask
    f2 = rng.standard_normal((24, 24)) * flat_geometry.mask
    s1 = attenuated_ray_transform(f1, [0.5], flat_geometry)
    s2 = attenuated_ray_transform(f2, [0.5], flat_geometry)
    combined = s1.with_values(s1.values + 2.0 * s2.values)

    g1 = invert_ray_transform(s1, 0.5, flat_geometry, reg=0.1, tol=1e-12, maxiter=20000).field
    g2 = invert_ray_transform(s2, 0.5, flat_geometry, reg=0.1, tol=1e-12, maxiter=20000).field
    g = invert_ray_transform(combined, 0.5, flat_geometry, reg=0.1, tol=1e-12, maxiter=20000).field
    assert np.allclose(g, g1 + 2.0 * g2, rtol=0, atol=1e-3 * np.abs(g).max())


def test_moments_in_the_kernel_span_are_recovered(disc_chart):
    kernels = np.stack([moment_kernel(disc_chart, lam, lambda th, k=k: np.exp(1j * k * th))
                        for lam in (0.5, 1.0, 1.5, 2.0) for k in (-1, 0, 1)])
    rng = np.random.default_rng(5)
    coeffs = rng.standard_normal(len(kernels)) + 1j * rng.standard_normal(len(kernels))
    q = np.tensordot(coeffs, np.conj(kernels), axes=1)
    moments = np.array([np.sum(k * q) for k in kernels])

    result = fourier_x1_recover(kernels, moments, disc_chart, mode="ridge")
    assert cosine_similarity(result.field, q, disc_chart) >= 0.9
    assert result.residual < 1e-3
    assert result.n_functionals == 12
