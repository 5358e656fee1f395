"""Exception types shared across the package.

Each class maps onto one CLI exit code, so callers can tell a diverged
training run apart from an unusable deletion request.
"""


class UnlearnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(UnlearnError, ValueError):
    exit_code = 1


class TrainingDiverged(UnlearnError, ArithmeticError):
    exit_code = 2

    def __init__(self, epoch: int, value: float | None = None):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite objective at epoch {epoch} (value={value})")


class IncompatibleModel(UnlearnError, ValueError):
    """Loss kind, labels, or dimensions do not fit the requested operation."""

    exit_code = 3


class EmptyRemainingSet(UnlearnError, ValueError):
    exit_code = 4


class FormatError(UnlearnError, ValueError):
    """Malformed input file."""

    exit_code = 5


class FactorizationError(UnlearnError, ArithmeticError):
    exit_code = 3


class CapacitanceSingular(FactorizationError):
    """The m x m Woodbury capacitance matrix is numerically singular.

    Raised when the deleted rows remove a whole direction of the feature
    span; the caller should rebuild the Gram matrix from the remaining rows.
    """
