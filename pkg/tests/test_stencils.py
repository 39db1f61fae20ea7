import numpy as np
import pytest

from utils.stencils import apply_along_axis, axis_operator, first_difference, trapezoid_weights


def test_first_difference_exact_on_quadratics():
    x = np.linspace(0.0, 2.0, 9)
    D = first_difference(9, x[1] - x[0])
    assert np.allclose(D @ (3 * x**2 - x + 1), 6 * x - 1, atol=1e-12)


def test_periodic_difference_annihilates_constants():
    D = first_difference(12, 2 * np.pi / 12, periodic=True)
    assert np.max(np.abs(D @ np.ones(12))) < 1e-14
    assert D.shape == (12, 12)


def test_first_difference_needs_three_nodes():
    with pytest.raises(ValueError):
        first_difference(2, 0.1)


def test_trapezoid_weights_sum_to_length():
    assert np.isclose(trapezoid_weights(11, 0.1).sum(), 1.0)
    assert np.isclose(trapezoid_weights(8, 2 * np.pi / 8, periodic=True).sum(), 2 * np.pi)


def test_axis_operator_matches_apply_along_axis():
    rng = np.random.default_rng(4)
    field = rng.standard_normal((5, 6, 7))
    D = first_difference(6, 0.2)
    lifted = axis_operator(D, 1, field.shape) @ field.reshape(-1)
    assert np.allclose(lifted.reshape(field.shape), apply_along_axis(D, field, 1))
