"""Utilities package for the Maxwell partial-data toolkit."""

from .errors import InverseProblemError

__all__ = ["InverseProblemError"]
