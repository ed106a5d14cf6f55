"""Exception types shared across the package."""


class SVMixError(Exception):
    """Base class for all package errors."""


class ShapeError(SVMixError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SVMixError):
    """A pre- or post-condition of an operation was violated."""


class ParameterError(SVMixError, ValueError):
    """A scalar parameter is outside its valid domain."""


class ConfigError(SVMixError, ValueError):
    """An experiment, dataset or model configuration is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class FormatError(SVMixError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset
