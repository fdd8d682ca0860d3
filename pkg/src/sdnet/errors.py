"""Exception hierarchy.  The CLI maps each family to an exit code."""


class SdnetError(Exception):
    pass


class ShapeError(SdnetError, ValueError):
    """Operand shapes do not conform."""


class ContractError(SdnetError, ValueError):
    """A non-shape precondition of an operation is violated."""


class ConfigError(SdnetError, ValueError):
    """Invalid configuration (architecture, layer, training or CLI)."""


class DataError(SdnetError, ValueError):
    """Malformed or unreadable input data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SdnetError, ArithmeticError):
    """Training produced a non-finite loss."""
