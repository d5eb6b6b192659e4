"""Exception hierarchy shared across the package."""


class LoRaFlowError(Exception):
    """Base class for all package errors."""


class ParameterError(LoRaFlowError, ValueError):
    """Invalid configuration value (SF, bandwidth, symbol index, ...)."""


class ShapeError(LoRaFlowError, ValueError):
    """Array shapes or lengths do not agree."""


class NumericError(LoRaFlowError, FloatingPointError):
    """Non-finite values appeared in a computation."""


class FormatError(LoRaFlowError, ValueError):
    """A file does not follow the expected on-disk layout."""


class TruncationError(FormatError):
    """A file payload is shorter than its header promises."""
