"""Exception types shared across masklab."""


class MasklabError(Exception):
    """Base class for all masklab errors."""


class DimensionError(MasklabError, ValueError):
    """Incompatible shapes, ranks or channel counts."""


class UsageError(MasklabError, RuntimeError):
    """An API was called in a state where the call is not meaningful."""


class NumericError(MasklabError, ArithmeticError):
    """NaN, infinity, or an input outside a function's numeric domain."""


class DomainError(MasklabError, ValueError):
    """A reduction or lookup over an empty domain."""


class FrozenParameterError(UsageError):
    """Attempted to update a parameter that belongs to a frozen model."""


class GenerationError(MasklabError, RuntimeError):
    """Synthetic state generation could not satisfy its constraints."""


class TrainingFailure(MasklabError, RuntimeError):
    """Training diverged or failed to reach its quality floor."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class FormatError(MasklabError, ValueError):
    """A serialized file did not match its expected binary layout."""


class ContractViolation(MasklabError, ValueError):
    """An input broke a documented value-range contract."""
