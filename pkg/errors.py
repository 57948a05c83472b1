"""
Exception hierarchy shared by every module.

Each error also inherits the builtin it refines, so callers can catch
ValueError / ArithmeticError without importing this module.
"""

from typing import Optional, Tuple


class OftError(Exception):
    """Base class for all library errors"""


class ShapeError(OftError, ValueError):
    """Operand dimensions do not line up"""


class ConfigError(OftError, ValueError):
    """Invalid configuration (divisibility, unknown architecture, bad key)"""


class DataError(OftError, ValueError):
    """Input data cannot be processed (non-finite values, malformed records)"""


class ContainerError(DataError):
    """Binary container is truncated or carries the wrong magic/version"""


class SingularMatrixError(OftError, ArithmeticError):
    """A pivot fell below working precision during a solve"""


class SingularEnergyError(OftError, ArithmeticError):
    """Hyperspherical energy is undefined (zero or coincident columns)"""


class SymmetryViolationError(OftError, ValueError):
    """Matrix handed to pack() is not skew-symmetric"""

    def __init__(self, message: str, worst: Optional[Tuple[int, int, float]] = None):
        super().__init__(message)
        self.worst = worst


class DivergenceRiskError(OftError, ArithmeticError):
    """Spectral norm estimate of Q exceeds the configured Neumann guard"""

    def __init__(self, message: str, norm_estimate: float):
        super().__init__(message)
        self.norm_estimate = norm_estimate


def check_shape(condition: bool, message: str) -> None:
    """Raise ShapeError with message unless condition holds"""
    if not condition:
        raise ShapeError(message)
