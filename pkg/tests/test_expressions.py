import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from utils.errors import ConfigInvalid
from utils.expressions import evaluate, parse

finite = st.floats(min_value=-10, max_value=10, allow_nan=False)


@given(a=finite, b=finite)
@settings(max_examples=50, deadline=None)
def test_arithmetic_matches_numpy(a, b):
    x1 = np.array([a, b])
    r = np.array([b, a])
    value = evaluate("2*x1 - r**2 + 0.5", {"x1": x1, "r": r})
    assert np.allclose(value, 2 * x1 - r**2 + 0.5)


def test_bump_is_one_at_origin_and_zero_outside():
    s = np.array([0.0, 1.0, -1.0, 1.5])
    assert np.allclose(evaluate("bump(x1)", {"x1": s}).real, [1.0, 0.0, 0.0, 0.0])


def test_complex_constants_and_broadcast():
    x1 = np.zeros((2, 3))
    value = evaluate("1 + 0.01j", {"x1": x1})
    assert value.shape == (2, 3)
    assert np.all(value == 1 + 0.01j)


@pytest.mark.parametrize("text", [
    "__import__('os')",
    "x1.real",
    "open('f')",
    "[x1]",
    "x1 if r else 1",
    "1 +",
])
def test_disallowed_constructs_are_rejected(text):
    with pytest.raises(ConfigInvalid):
        parse(text)


def test_unknown_coordinate_on_chart():
    with pytest.raises(ConfigInvalid):
        evaluate("z + 1", {"x1": np.zeros(3)})
