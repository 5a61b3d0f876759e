"""Exception types raised by oodguard.

Errors split into two families so the CLI can map them to exit codes:
``DataError`` (bad or inconsistent inputs, exit 2) and ``NumericError``
(a computation that could not be completed, exit 3).
"""


class OODGuardError(Exception):
    """Base class for every error raised by this package."""


class DataError(OODGuardError, ValueError):
    pass


class NumericError(OODGuardError, ArithmeticError):
    pass


# npy format
class MalformedHeader(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class SizeMismatch(DataError):
    pass


# archives
class InconsistentSampleCount(DataError):
    pass


class MissingLogits(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class MissingLabels(DataError):
    pass


class EmptyArchive(DataError):
    pass


# detectors
class EmptyClass(DataError):
    pass


class EmptyPredictedClass(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LayerMismatch(DataError):
    pass


class EmptyScores(DataError):
    pass


class EmptySeries(DataError):
    pass


class SingularCovariance(NumericError):
    pass


class NonFiniteLogit(NumericError):
    pass


class DegenerateCalibration(UserWarning):
    """Calibration was fitted on fewer samples than recommended."""
