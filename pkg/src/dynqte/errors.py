"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DynQTEError(Exception):
    """Base class for all package errors."""


class DataValidationError(DynQTEError, ValueError):
    """Malformed or inconsistent input data.

    ``row`` carries the 1-based line number in the source file when the
    problem can be attributed to a single row.
    """

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(DynQTEError, ArithmeticError):
    """Base class for solver failures."""


class SingularDesignError(NumericalError):
    """Design matrix is rank deficient.

    ``index`` identifies the failing sub-problem (a time point, or a
    ``(t, region)`` pair) when raised from a path fit.
    """

    def __init__(self, message: str, index=None):
        self.index = index
        super().__init__(message)


class ConvergenceError(NumericalError):
    """Iterative solver hit its iteration cap.

    ``iterate`` holds the last coefficient iterate and ``gap`` the duality
    gap at that point.
    """

    def __init__(self, message: str, iterate=None, gap=None, index=None):
        self.iterate = iterate
        self.gap = gap
        self.index = index
        super().__init__(message)


class BootstrapAbort(NumericalError):
    """A bootstrap replication failed repeatedly and the test was abandoned."""

    def __init__(self, message: str, replication: int, attempts: int):
        self.replication = replication
        self.attempts = attempts
        super().__init__(message)
