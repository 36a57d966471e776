"""Exception types shared across the package.

Every error raised on purpose derives from :class:`FusionError` so callers can
catch one base class at the boundary (the CLI does exactly that).
"""

from __future__ import annotations


class FusionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidProblemError(FusionError):
    """A fusion problem failed structural validation (shapes, weights, counts)."""


class DimensionMismatchError(InvalidProblemError):
    """Source summaries do not share a common parameter dimension."""


class MissingCovarianceError(InvalidProblemError):
    """An operation required per-source covariances that were not supplied."""


class InvalidCovarianceError(InvalidProblemError):
    """A covariance matrix is not symmetric positive definite."""


class InvalidWeightingMatrixError(InvalidProblemError):
    """A user-supplied weighting matrix is not symmetric positive definite."""


class InvalidGroundTruthError(FusionError):
    """Ground truth inconsistent: a source outside the unbiased set has zero bias,
    or shapes do not match the problem."""


class IdentificationFailureError(FusionError):
    """The identification margin is non-positive; the initial estimator carries
    no consistency guarantee for this configuration."""


class SingularSystemError(FusionError):
    """A linear system that should be positive definite was numerically singular."""


class EmptySelectionError(FusionError):
    """An estimator was asked to combine an empty set of sources."""


class InvalidContrastError(FusionError):
    """A contrast matrix for a Wald test is not of full row rank."""


class InvalidDesignError(FusionError):
    """A simulation design is malformed (bad dimension multiples, counts, ...)."""


class ParseError(FusionError):
    """A summary file could not be parsed.

    Carries the 1-based record number (CSV data row or JSON array index) when
    known, so messages can point at the offending record.
    """

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class NotConvergedError(FusionError):
    """An iterative solver exhausted its iteration budget.

    The best iterate found so far is attached as ``result`` so callers can
    inspect or report it.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
