"""Exception types raised by the attention engine."""


class ScfaError(Exception):
    """Base class for all engine errors."""


class ShapeError(ScfaError, ValueError):
    """Tensor extents are invalid or operands do not match."""


class FormatError(ScfaError, ValueError):
    """A tensor file is malformed. Carries the byte offset of the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ParameterError(ScfaError, ValueError):
    """A configuration parameter violates its constraint."""


class NumericError(ScfaError, ArithmeticError):
    """A numeric precondition failed (non-finite values, zero norms, ...)."""


class ContractError(ScfaError, ValueError):
    """Kernel inputs violate a structural invariant (e.g. index monotonicity)."""
