"""Exception types raised across the package."""


class GPEError(Exception):
    """Base class for all package errors."""


class NearSingular(GPEError, ArithmeticError):
    """A Cholesky diagonal is too small to invert the precision."""


class Singular(GPEError, ArithmeticError):
    """A 3x3 matrix has (numerically) zero determinant."""


class ParseError(GPEError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateCloud(GPEError, ValueError):
    """All points of a cloud coincide."""


class DomainViolation(GPEError, ValueError):
    """A point left the voxel domain and fallback evaluation is disabled."""


class ShapeMismatch(GPEError, ValueError):
    pass


class NonFinite(GPEError, FloatingPointError):
    """Loss or gradient became NaN/Inf during training."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class ConfigError(GPEError, ValueError):
    pass


class FormatError(GPEError, ValueError):
    """Malformed model file."""
