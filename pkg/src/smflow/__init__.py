"""Schrödinger map flow from the circle into Kähler targets, with diagnostics
and a div-curl certification engine."""
from .geometry import (
    ContractViolation,
    DegenerateInputError,
    FlatTorus2,
    FubiniStudyCP1,
    RechartRequired,
    Sphere2,
    make_geometry,
)
from .grid import MapState, PeriodicGrid
from .flow import NonConvergenceError, SchemeConfig, StabilityError, evolve

__version__ = "0.1.0"
