"""Models package for the Maxwell partial-data toolkit."""

from .chart import BoundaryRegion, Geodesic, ProductChart, SimpleSurface
from .forms import BoundaryForm, GradedForm
from .materials import MaterialPair, MatrixPotential

__all__ = ["BoundaryRegion", "Geodesic", "ProductChart", "SimpleSurface",
           "BoundaryForm", "GradedForm", "MaterialPair", "MatrixPotential"]
