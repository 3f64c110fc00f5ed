"""Exception types shared across the package."""


class ModalAnchorError(Exception):
    """Base class for all package errors."""


class DimensionError(ModalAnchorError, ValueError):
    """Operand shapes do not conform."""


class ContractError(ModalAnchorError, RuntimeError):
    """A call violated a documented precondition."""


class NumericError(ModalAnchorError, ArithmeticError):
    """A computation produced a non-finite value."""


class ParameterError(ModalAnchorError, ValueError):
    """A hyperparameter or configuration value is out of range."""


class InputError(ModalAnchorError, ValueError):
    """Input data is missing or empty."""


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(InputError):
    def __init__(self, message: str, line: int | None = None, fields: list[str] | None = None):
        self.line = line
        self.fields = list(fields or [])
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
