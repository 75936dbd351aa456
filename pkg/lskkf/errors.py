"""Exception hierarchy shared by every lskkf module."""


class LskkfError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LskkfError, ValueError):
    """Operand sizes do not chain."""


class ConfigError(LskkfError, ValueError):
    """Configuration rejected before any computation ran."""

    def __init__(self, key: str, expected: str, got: object = None):
        self.key = key
        self.expected = expected
        self.got = got
        detail = f" (got {got!r})" if got is not None else ""
        super().__init__(f"{key}: expected {expected}{detail}")


class NumericError(LskkfError, ArithmeticError):
    """Non-finite iterates or a failed factorization."""


class NotSPDError(NumericError):
    """Matrix is not symmetric positive definite."""


class ConvergenceError(NumericError):
    """Fixed-point iteration ran out of iterations."""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} after {iterations} iterations (residual {residual:.3e})")


class DegenerateConditioningError(LskkfError):
    """Conditioning on a state with zero prior variance."""


class MaskError(LskkfError, ValueError):
    """Material masks overlap, are not binary, or leave cells uncovered."""


class FieldFormatError(LskkfError, ValueError):
    """A scalar-field file does not follow its declared format."""
