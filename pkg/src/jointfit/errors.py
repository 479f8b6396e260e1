"""Exception hierarchy used across the package."""


class JointFitError(Exception):
    """Base class for all package errors."""


class InvalidInputError(JointFitError, ValueError):
    """Inputs violate a documented precondition."""


class DataFormatError(InvalidInputError):
    """A data file could not be ingested.

    Carries the offending location so the CLI can report it.
    """

    def __init__(self, message, file=None, row=None, column=None):
        self.file = file
        self.row = row
        self.column = column
        where = []
        if file is not None:
            where.append(f"file={file}")
        if row is not None:
            where.append(f"row={row}")
        if column is not None:
            where.append(f"column={column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class NumericalDomainError(JointFitError, ArithmeticError):
    """A matrix that must be positive definite is not, or a value left its domain."""


class InconsistentHazardError(JointFitError):
    """An observed event time has no jump in the step hazard."""


class DegenerateRiskSetError(JointFitError):
    """An event time has an empty (or zero-weight) risk set."""


class OptimizationError(JointFitError):
    """An inner optimizer failed to converge; ``last_iterate`` holds where it stopped."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SingularInformationError(JointFitError):
    """The efficient information matrix is not invertible.

    ``null_directions`` lists (parameter name, loading) pairs of the
    eigenvectors whose eigenvalues fall below the threshold.
    """

    def __init__(self, message, null_directions=()):
        super().__init__(message)
        self.null_directions = list(null_directions)


class InternalError(JointFitError, RuntimeError):
    """An internal consistency check failed (e.g. an ascent step decreased the objective)."""
