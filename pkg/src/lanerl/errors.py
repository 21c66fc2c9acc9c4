"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated by the caller."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ConfigError(ValueError):
    """A run configuration is malformed, incomplete, or inconsistent."""


class PlacementError(RuntimeError):
    """Vehicle placement failed; the requested traffic density is too high."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the declared layout."""


class EmptyRunError(RuntimeError):
    """A report was requested for a run directory with no usable logs."""
