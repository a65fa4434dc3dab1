"""Exception types raised across the package."""


class BWCPError(Exception):
    """Base class for all package errors."""


class DomainError(BWCPError, ValueError):
    pass


class InsufficientDataError(BWCPError, ValueError):
    pass


class DegenerateScaleError(BWCPError, ValueError):
    pass


class DegenerateDeltaError(BWCPError, ValueError):
    """Raised when the activation-threshold denominator vanishes (e.g. C=1)."""


class ParameterError(BWCPError, ValueError):
    pass


class InputError(BWCPError, ValueError):
    pass


class DimensionError(BWCPError, ValueError):
    pass


class InvalidStateError(BWCPError, RuntimeError):
    pass


class UninitializedStatisticsError(InvalidStateError):
    pass


class PreconditionError(BWCPError, ValueError):
    pass


class DivergenceError(BWCPError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StructuralError(BWCPError, RuntimeError):
    pass


class ConfigError(BWCPError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class CheckpointError(BWCPError, IOError):
    pass


class ChecksumError(CheckpointError):
    pass
