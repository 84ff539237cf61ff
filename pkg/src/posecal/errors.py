"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``NumericalError`` subclasses with 3.
"""


class PosecalError(Exception):
    """Base class for all package errors."""


class DataError(PosecalError, ValueError):
    """Input data is malformed or inconsistent."""


class NumericalError(PosecalError, ArithmeticError):
    """A computation left its numerically valid regime."""


class ShapeError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class AlignmentError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class BranchCutError(NumericalError):
    """Rotation angle too close to pi for a unique principal logarithm."""


class DecompositionError(NumericalError):
    pass


class IllConditionedError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass
