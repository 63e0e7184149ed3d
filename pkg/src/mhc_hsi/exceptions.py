"""Exception types raised across the package."""


class MHCError(Exception):
    """Base class for package errors."""


class DimensionError(MHCError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MHCError, ValueError):
    """A configuration value is invalid."""


class ContractError(MHCError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(MHCError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class FormatError(MHCError, ValueError):
    """A binary container is malformed."""


class DataError(MHCError, ValueError):
    """Labels or masks are unusable for the requested operation."""


class DivergenceError(MHCError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, max_grad, message=None):
        self.step = step
        self.max_grad = max_grad
        super().__init__(
            message or f"loss became non-finite at step {step} (max |grad| = {max_grad:.3e})"
        )
