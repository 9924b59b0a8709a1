"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class DT4RecError(Exception):
    exit_code = 1


class ConfigError(DT4RecError, ValueError):
    exit_code = 2


class InputShapeError(DT4RecError, ValueError):
    exit_code = 2


class OrderingError(DT4RecError, ValueError):
    exit_code = 2


class DomainError(DT4RecError, ValueError):
    exit_code = 2


class DegenerateInputError(DT4RecError, ValueError):
    exit_code = 2


class VocabularyError(DT4RecError, KeyError):
    exit_code = 4

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(DT4RecError, IOError):
    exit_code = 3


class CompatibilityError(DT4RecError):
    exit_code = 4


class NumericError(DT4RecError, ArithmeticError):
    exit_code = 5


EXIT_IO = 3
