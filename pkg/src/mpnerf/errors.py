"""Exception hierarchy shared by all modules."""


class MPNeRFError(Exception):
    """Base class for every error raised by this package."""


class InputDomainError(MPNeRFError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ValidationError(MPNeRFError, ValueError):
    """A structural invariant is violated (shapes, counts, rigidity...)."""


class UsageError(MPNeRFError, RuntimeError):
    """An API was called out of order, e.g. backward without a forward cache."""


class DatasetError(MPNeRFError):
    """On-disk data is missing or malformed."""


class NumericError(MPNeRFError, ArithmeticError):
    """Training diverged (NaN or infinite loss)."""
