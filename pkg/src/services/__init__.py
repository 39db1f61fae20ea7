"""
Services package for the Maxwell partial-data toolkit.

One service module per pipeline stage: geometry, exterior calculus,
reduction, forward solves, CGO construction, Carleman checks, ray
transforms and recovery.
"""

from .exterior_calculus import ExteriorCalculus, calculus_for

__all__ = ['ExteriorCalculus', 'calculus_for']
