"""
Error types for zimed.
Every failure the library raises on purpose is a ZimedError carrying the CLI exit code of its family.
"""


class ZimedError(Exception):
    """Base class for all zimed errors."""

    exit_code = 1


class UsageError(ZimedError):
    """Invalid arguments, configuration or preconditions."""

    exit_code = 2


class DataError(ZimedError):
    """Input data that violates the dataset contract."""

    exit_code = 3


class ConvergenceError(ZimedError):
    """A fit, factorization or resampling loop that did not produce a usable result."""

    exit_code = 4


class OutputError(ZimedError):
    """Artifacts could not be read or written."""

    exit_code = 5


# Data errors


class NonIntegerCount(DataError):
    pass


class MissingValue(DataError):
    pass


class ConstantExposure(DataError):
    pass


class NonPositiveOffset(DataError):
    pass


class InvalidExposure(DataError):
    pass


class LengthMismatch(DataError):
    pass


class TooManyMediators(DataError):
    pass


class Collinear(DataError):
    pass


class ZeroDensity(DataError):
    """A mediator mass underflowed to zero for some subject/taxon."""

    def __init__(self, message: str, subject: int = -1, taxon: int = -1):
        super().__init__(message)
        self.subject = subject
        self.taxon = taxon


class DegenerateCells(DataError):
    pass


class RankDeficient(DataError):
    pass


# Convergence errors


class Separation(ConvergenceError):
    pass


class NonConvergence(ConvergenceError):
    pass


class CholeskyFailure(ConvergenceError):
    pass


class SingularGradient(ConvergenceError):
    pass


class NonFiniteWeight(ConvergenceError):
    pass


class TooManyFailures(ConvergenceError):
    pass


# Usage errors


class UnsupportedGenerator(UsageError):
    pass


class DegreesOfFreedomTooSmall(UsageError):
    pass


class InsufficientReplicates(UsageError):
    pass


class InsufficientDraws(UsageError):
    pass
