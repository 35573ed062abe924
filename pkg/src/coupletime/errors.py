"""Exception types shared across the package."""


class CoupletimeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidGridError(CoupletimeError):
    """Time grid is malformed (nonpositive step, zero length, delay violation)."""


class InvalidParameterError(CoupletimeError):
    """A numeric parameter is outside its admissible range."""


class InvalidStateError(CoupletimeError):
    """A state value violates its structural constraints (e.g. l < |x| is fine,
    but s < b in a running-supremum pair is not)."""


class NumericFailureError(CoupletimeError):
    """A numerical routine produced NaN/Inf or failed to converge."""


class QuadratureFailureError(NumericFailureError):
    """Adaptive quadrature did not reach its error target."""


class MonotonicityViolationError(NumericFailureError):
    """A quantity that must be monotone (a CDF, an overlap curve) regressed
    beyond the quadrature tolerance."""


class CalibrationFailureError(CoupletimeError):
    """Stage-tolerance calibration lacks tail resolution; rerun with more
    replicates or a longer horizon."""


class NonTerminationError(CoupletimeError):
    """A restart loop exceeded its retry cap."""


class UnsupportedStartError(InvalidParameterError):
    """Process started on a singular set (e.g. the planar origin)."""


class IncompletePathError(CoupletimeError):
    """A path does not contain the event needed to post-process it."""
