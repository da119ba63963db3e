"""Exception and warning types raised across the package."""


class ConfoptError(Exception):
    """Base class for every error raised by confopt."""


class DegenerateDenominator(ConfoptError, ArithmeticError):
    """A ratio metric was evaluated where its denominator is not positive."""


class LayoutMismatch(ConfoptError, ValueError):
    """A vector, loss or metric does not fit the confusion layout it was given."""


class EmptySample(ConfoptError, ValueError):
    pass


class GroupOutOfRange(ConfoptError, IndexError):
    pass


class DegenerateLoss(ConfoptError, ValueError):
    pass


class InvalidData(ConfoptError, ValueError):
    pass


class NumericalFailure(ConfoptError, ArithmeticError):
    """Raised when an iterate stops being finite or a factorization breaks down."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ZeroCutDirection(ConfoptError, ValueError):
    pass


class BudgetExceeded(ConfoptError, RuntimeError):
    pass


class InfeasibleAtGridResolution(ConfoptError, RuntimeError):
    pass


class SchemaError(ConfoptError, ValueError):
    pass


class ConfigError(ConfoptError, ValueError):
    pass


class StrictFeasibilityUnknown(UserWarning):
    """The initial classifier could not be confirmed to satisfy the constraints with margin."""
