"""Continuum first-passage percolation with ball-shaped point defects."""

from .model import (Box, Domain, IntensityField, InsufficientData, InvalidParameter,
                    MarkedConfiguration, NotFound, OutOfDomain, PointConfiguration,
                    SimParams, domain_contains, eval_intensity, kappa)

__version__ = "0.1.0"

__all__ = [
    "Box", "Domain", "IntensityField", "InsufficientData", "InvalidParameter",
    "MarkedConfiguration", "NotFound", "OutOfDomain", "PointConfiguration",
    "SimParams", "domain_contains", "eval_intensity", "kappa", "__version__",
]
