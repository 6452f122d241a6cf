"""Exception hierarchy shared by every dualcue module."""


class DualCueError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes."""

    exit_code = 2


class InvalidInputError(DualCueError, ValueError):
    pass


class ConfigurationError(DualCueError, ValueError):
    exit_code = 1


class DegenerateInputError(InvalidInputError):
    """Input is well-formed but the quantity is undefined (e.g. zero variance)."""


class UndefinedMetricError(InvalidInputError):
    pass


class FormatError(DualCueError):
    pass


class LoadError(DualCueError):
    pass


class DataIntegrityError(DualCueError):
    pass


class NumericFailure(DualCueError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
