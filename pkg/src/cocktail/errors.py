class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint archive."""
