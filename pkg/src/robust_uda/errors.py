"""Exception types shared across the package."""


class RobustUdaError(Exception):
    """Base class for all package errors."""


class ShapeError(RobustUdaError, ValueError):
    """Input dimensions do not match the model or operand."""


class ValidationError(RobustUdaError, ValueError):
    """An argument violates its documented precondition."""


class CapabilityError(RobustUdaError):
    """The requested mode is not supported by the model configuration."""


class SchemaError(RobustUdaError, ValueError):
    """A data file does not follow the expected CSV layout."""


class ConfigError(RobustUdaError, ValueError):
    """Unknown or malformed run configuration."""


class DivergenceError(RobustUdaError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, stage, epoch, value):
        self.stage = stage
        self.epoch = epoch
        self.value = value
        super().__init__(f"{stage}: non-finite loss {value!r} at epoch {epoch}")
