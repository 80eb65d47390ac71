"""Exception hierarchy shared across the package.

Every error raised on a contract violation derives from SemFieldError so
the CLI can map failures to a single-line machine-parsable prefix.
"""


class SemFieldError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SemFieldError):
    """An argument violates an operation's precondition."""


class BoundsError(InvalidInputError):
    """A pixel or index lies outside its valid range."""


class EmptyDatasetError(InvalidInputError):
    """A dataset build or training run received no usable records."""


class FormatError(SemFieldError):
    """A serialized file is malformed. Carries the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SemFieldError):
    """A non-finite value appeared where finite math was required."""


class CapabilityError(SemFieldError):
    """A requested operation needs a model component that is absent."""


class BudgetError(SemFieldError):
    """A requested computation exceeds a configured resource budget."""


class StaleCacheError(SemFieldError):
    """A cached structure no longer matches the model it was built from."""
