"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ValidationError(ValueError):
    """An argument is well-shaped but semantically invalid."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or inconsistent.

    ``key`` names the offending configuration entry when one applies.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


class StateError(RuntimeError):
    """An object was used before it was ready (e.g. an untrained head)."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""
