class AttnEditError(Exception):
    """Base class for all package errors."""


class ConfigError(AttnEditError):
    """Invalid configuration or precondition violation."""


class NumericError(AttnEditError):
    """Non-finite values, divergence, or degenerate numerical setups."""


class NotFittedError(AttnEditError):
    """A model was used before training."""
