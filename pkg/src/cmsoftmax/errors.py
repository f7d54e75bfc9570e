"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to (1 usage/config,
2 data/format, 3 numeric divergence).
"""


class CMError(Exception):
    exit_code = 1


class DimensionError(CMError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class DomainError(CMError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateFeatureError(DomainError):
    """A zero-length feature or weight vector makes a cosine undefined."""

    exit_code = 3


class ContractViolation(CMError, RuntimeError):
    pass


class NumericError(CMError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class FormatError(CMError, ValueError):
    exit_code = 2


class UnsupportedVersionError(FormatError):
    pass


class ConsistencyError(FormatError):
    pass


class TruncatedFileError(FormatError, OSError):
    """A binary file ended before its header said it would."""


class ConfigError(CMError, ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.key = key
