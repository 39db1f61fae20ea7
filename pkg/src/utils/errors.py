"""
Error types raised across the inverse-problem pipeline.

Every service raises one of these instead of a bare ValueError so the
command line can map failures to exit codes and stage names.
"""

from typing import Optional


class InverseProblemError(Exception):
    """Base class for all pipeline errors."""


class PreconditionError(InverseProblemError):
    """An operation was called with arguments outside its contract."""


class NonSimpleSurface(InverseProblemError):
    """The surface metric is not positive along a traced geodesic."""


class NonpositiveConformalFactor(InverseProblemError):
    """A conformal factor c <= 0 was supplied."""


class DomainTouchesPole(InverseProblemError):
    """The domain closure meets the pole or the plane x3 = 0."""


class MaterialError(InverseProblemError):
    """Material parameters violate Re(eps) > 0, Re(mu) > 0."""


class BranchCutCrossing(InverseProblemError):
    """log(eps) or log(mu) jumps across the principal branch cut."""


class NearResonance(InverseProblemError):
    """The Maxwell system is too badly conditioned at this frequency."""


class NonConvergence(InverseProblemError):
    """An iterative solver stopped before reaching its tolerance."""


class ResolutionExceeded(InverseProblemError):
    """tau or lambda is too large for the grid spacing."""


class GammaSignViolation(InverseProblemError):
    """<dphi, nu> >= 0 somewhere on the closure of Gamma."""


class DegenerateSample(InverseProblemError):
    """Carleman right-hand side vanishes for a test form."""


class GeometryMismatch(InverseProblemError):
    """A sinogram does not belong to the geometry it is used with."""


class IllPosedSampling(InverseProblemError):
    """The moment design matrix is too rank deficient."""


class BoundaryAgreementViolated(InverseProblemError):
    """Two materials do not agree to second order on the boundary."""


class NewtonDivergence(InverseProblemError):
    """Newton iteration failed; carries the iteration history."""

    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report or {}


class ConfigInvalid(InverseProblemError):
    """A run configuration failed schema validation."""


class StageFailure(InverseProblemError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
