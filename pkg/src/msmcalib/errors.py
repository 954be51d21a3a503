"""Exception hierarchy.

`DataError` covers malformed input and violated data invariants;
`NumericalError` covers fits and solves that fail to produce an answer.
The CLI maps them to distinct exit codes.
"""


class MsmCalibError(Exception):
    pass


class DataError(MsmCalibError, ValueError):
    pass


class FormulaError(DataError):
    pass


class NumericalError(MsmCalibError, ArithmeticError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, message, dependent_columns=()):
        super().__init__(message)
        self.dependent_columns = tuple(dependent_columns)


class ConvergenceError(NumericalError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


class InfeasibleCalibrationError(NumericalError):
    pass


class BootstrapFailureError(NumericalError):
    pass


class SeparationWarning(UserWarning):
    pass


class PositivityWarning(UserWarning):
    pass
