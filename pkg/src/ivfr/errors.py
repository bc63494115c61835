"""Exception hierarchy.

Validation errors map to CLI exit code 2, numerical errors to exit code 3.
"""


class IVFRError(Exception):
    exit_code = 1


class ValidationError(IVFRError, ValueError):
    exit_code = 2


class NumericalError(IVFRError, ArithmeticError):
    exit_code = 3


class InvalidGridError(ValidationError):
    pass


class GridMismatchError(ValidationError):
    pass


class EmptyGroupError(ValidationError):
    pass


class InvalidWeightError(ValidationError):
    pass


class NonFiniteInputError(ValidationError):
    pass


class OracleScaleError(ValidationError):
    pass


class DesignError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class ConditioningError(NumericalError):
    """A moment matrix failed its rank check; carries the offending condition number."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


class SingularInstrumentsError(ConditioningError):
    pass


class SingularCovariatesError(ConditioningError):
    pass


class WeakRankError(ConditioningError):
    pass


class DegenerateCoordinateError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass
