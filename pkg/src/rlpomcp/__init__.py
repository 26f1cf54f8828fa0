"""Learned parameter selection for a POMCP informative-path-planning solver."""
from .gp import GpModel, KernelHyper
from .objective import Objective, ObjectiveKind, ZMode
from .pomcp import SolverParams, plan
from .world import WorldField, make_synthetic_field

__all__ = [
    "GpModel", "KernelHyper", "Objective", "ObjectiveKind", "ZMode", "SolverParams", "plan", "WorldField",
    "make_synthetic_field",
]
__version__ = "0.1.0"
