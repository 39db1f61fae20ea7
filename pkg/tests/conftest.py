"""
Shared fixtures: small charts and material pairs that keep the sparse
systems at a few thousand unknowns.
"""

import os
import sys

import pytest

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "src"))

from services.geometry import build_chart  # noqa: E402
from services.reduction import materials_from_spec  # noqa: E402

BUMP = "1 + 0.2*bump(sqrt(x1**2 + (r - 1)**2)/0.3)"


@pytest.fixture
def disc_chart():
    """Flat-disc annulus chart, 10 x 10 x 8."""
    return build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [10, 10, 8]})


@pytest.fixture
def fine_disc_chart():
    """Flat-disc annulus chart, 12 x 12 x 8, resolving tau up to 2.75."""
    return build_chart({"surface": "flat_disc", "x1_range": [-1, 1], "r_range": [0.5, 1.5],
                        "shape": [12, 12, 8]})


@pytest.fixture
def cap_chart():
    return build_chart({"surface": "spherical_cap", "x1_range": [-1, 1], "r_range": [0.2, 1.0],
                        "shape": [8, 10, 8]})


@pytest.fixture
def slab_chart():
    return build_chart({"surface": "planar", "x1_range": [-1, 1], "r_range": [0, 1],
                        "theta_range": [0, 1], "shape": [8, 7, 7]})


@pytest.fixture
def vacuum(disc_chart):
    return materials_from_spec({"omega": 1.3}, disc_chart)


@pytest.fixture
def bump_material(disc_chart):
    return materials_from_spec({"omega": 1.3, "eps": BUMP}, disc_chart)
