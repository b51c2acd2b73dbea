class DimensionError(ValueError):
    """Operand shapes do not match."""


class NumericError(RuntimeError):
    """A numerical procedure failed to reach its accuracy contract."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


class MissingCacheError(RuntimeError):
    """A pipeline stage needs an artifact that has not been built."""
