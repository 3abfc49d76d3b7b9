from typing import Any, Optional


class MFGLabError(Exception):
    """Base class for all solver and configuration failures."""


class SpecValidationError(MFGLabError, ValueError):
    pass


class GridMismatchError(MFGLabError, ValueError):
    pass


class ConfigError(MFGLabError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ConvergenceError(MFGLabError):
    """Raised when an iteration exhausts its budget. Carries the last residual and iterate."""

    def __init__(self, message: str, residual: float, iterate: Any = None):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual
        self.iterate = iterate


class OscillationError(ConvergenceError):
    pass


class NullSpaceError(MFGLabError):
    def __init__(self, message: str, components: int):
        super().__init__(message)
        self.components = components


class PositivityLossError(MFGLabError):
    pass


class StepCollapseError(MFGLabError):
    pass


class UnderResolvedError(MFGLabError, ValueError):
    pass


class BoxTooSmallError(MFGLabError):
    pass


class NonCauchyError(MFGLabError):
    pass
