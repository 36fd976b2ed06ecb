"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value or formula is invalid."""


class PreconditionError(ValueError):
    """An operation was called outside its documented domain."""
