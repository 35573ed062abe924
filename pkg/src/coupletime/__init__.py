"""Couplings of Brownian motion with its local time, and planar relatives.

The package simulates and numerically verifies couplings of the pair
(Brownian motion, running supremum kept above a floor), the delayed
couplings that make such constructions strictly causal, and the staged
couplings of the planar square-process diffusion.  Everything is driven
by splittable counter-based random streams so results are reproducible
and independent of worker count.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationFailureError,
    CoupletimeError,
    IncompletePathError,
    InvalidGridError,
    InvalidParameterError,
    InvalidStateError,
    MonotonicityViolationError,
    NonTerminationError,
    NumericFailureError,
    QuadratureFailureError,
    UnsupportedStartError,
)
from .streams import RngStream, TimeGrid

__all__ = [
    "__version__",
    "CalibrationFailureError",
    "CoupletimeError",
    "IncompletePathError",
    "InvalidGridError",
    "InvalidParameterError",
    "InvalidStateError",
    "MonotonicityViolationError",
    "NonTerminationError",
    "NumericFailureError",
    "QuadratureFailureError",
    "RngStream",
    "TimeGrid",
    "UnsupportedStartError",
]
