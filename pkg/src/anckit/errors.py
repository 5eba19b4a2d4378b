class AnckitError(Exception):
    """Base class for errors raised by anckit."""


class ConfigurationError(AnckitError, ValueError):
    """Invalid parameters or inconsistent inputs."""


class DataFormatError(AnckitError, ValueError):
    """A file could not be parsed or failed validation."""


class SchemaError(DataFormatError):
    """Serialized document has the wrong schema version or layout."""


class FitError(AnckitError):
    """Uncertainty model fitting failed at some bin."""

    def __init__(self, message, bin_index=None):
        super().__init__(message)
        self.bin_index = bin_index


class NestingError(AnckitError):
    """A warm start that set nesting guarantees to be feasible is not."""
