"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class FPError(Exception):
    exit_code = 1


class ConfigError(FPError):
    exit_code = 2


class InvalidField(FPError, ValueError):
    exit_code = 3


class GeometryError(FPError, ValueError):
    exit_code = 2


class ShapeError(FPError, ValueError):
    exit_code = 2


class CorpusError(FPError):
    exit_code = 3


class DatasetError(FPError):
    exit_code = 3


class DivergenceError(FPError, ArithmeticError):
    """Raised when an iterative method blows up.

    ``trace`` holds whatever loss/residual history was collected, and
    ``checkpoint`` the last good state when one exists.
    """

    exit_code = 4

    def __init__(self, message, trace=None, checkpoint=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
        self.checkpoint = checkpoint
