"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class UsageError(ValueError):
    """Arguments are individually valid but incompatible with each other."""


class ConfigError(UsageError):
    """An experiment or training configuration failed validation."""


class DataError(ValueError):
    """A data file could not be parsed or produced an empty result."""
