"""Shared exception types used across the package."""


class DimensionError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Numeric input outside the operation's domain (e.g. log of a negative)."""


class UndefinedCorrelationError(DomainError):
    """Pearson correlation of a constant image is undefined."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class FormatError(ValueError):
    """A binary container or manifest is malformed."""


class ValidationError(ValueError):
    """A dataset or configuration document failed validation."""


class ConfigError(ValueError):
    """Bad run configuration (CLI exit code 2)."""


class TrainingAborted(RuntimeError):
    """A non-finite loss or gradient surfaced during optimization."""
