"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite value."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DataError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeneratorError(RuntimeError):
    """Synthetic data could not be generated with the requested geometry."""
