from typing import Any, Dict, Optional


class MMNPPError(Exception):
    """Base error for the calibration toolkit.

    Every error carries the process exit code the CLI should use and a
    machine-readable form for error.json.
    """

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': self.message,
            'exit_code': self.exit_code,
            'context': {k: v for k, v in self.context.items() if v is not None},
        }


class NumericalError(MMNPPError):
    exit_code = 1


class InputError(MMNPPError):
    exit_code = 2


# Numerical failures

class NonFinite(NumericalError):
    pass


class UnderflowCollapse(NumericalError):
    def __init__(self, message: str, k: Optional[int] = None, value: Optional[float] = None):
        super().__init__(message, k=k, value=value)
        self.k = k


class EmptyState(NumericalError):
    pass


class NonIdentifiable(InputError):
    """Fewer claims than regimes; treated as a usage error."""


# Parameter validation

class NegativeOffDiagonal(InputError):
    pass


class RowSumViolation(InputError):
    pass


class NonPositiveIntensity(InputError):
    pass


class BadProbabilityVector(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class OrderMismatch(InputError):
    pass


# Data shape and range

class OutOfHorizon(InputError):
    pass


class UnsortedInput(InputError):
    pass


class GridOutsideHorizon(InputError):
    pass


class InvalidExposure(InputError):
    pass


class SeriesTooShort(InputError):
    pass


class ZeroVariance(InputError):
    pass


class DegenerateSigns(InputError):
    pass


class LengthMismatch(InputError):
    pass


class NonPositiveExpected(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{location}{message}", path=path, line=line)
        self.path = path
        self.line = line
