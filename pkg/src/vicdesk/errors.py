"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VicError(Exception):
    exit_code = 1


class UsageError(VicError):
    exit_code = 2


class ShapeError(VicError, ValueError):
    exit_code = 3


class DataError(VicError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ValidationError(DataError):
    pass


class ReportError(DataError):
    pass


class NumericError(VicError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DependencyError(VicError):
    exit_code = 5
