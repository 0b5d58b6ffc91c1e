"""Exception hierarchy shared by every tsdlab module."""

from typing import Optional


class TsdLabError(Exception):
    """Base class for all tsdlab errors."""


class InvalidMatrix(TsdLabError, ValueError):
    """Matrix is not 2-D, is empty, or holds NaN/Inf entries."""


class ShapeMismatch(TsdLabError, ValueError):
    """Operands have incompatible shapes."""


class InvalidArgument(TsdLabError, ValueError):
    """Argument outside its documented range."""


class InvalidState(TsdLabError, RuntimeError):
    """Operation not allowed for the adapter's method or phase."""


class DegenerateProjection(TsdLabError, ArithmeticError):
    """Projection onto the launched directions is (numerically) zero."""


class MatrixFormatError(TsdLabError, ValueError):
    """Malformed TSDW or CSV matrix file."""


class NumericDivergence(TsdLabError, ArithmeticError):
    """Training produced a non-finite loss."""


class ReportError(TsdLabError, OSError):
    """Report or artifact could not be written or read."""


class ConfigError(TsdLabError, ValueError):
    """Malformed or unknown configuration entry."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where = f"{where}{line}:"
        super().__init__(f"{where} {message}" if where else message)
