"""Exception hierarchy shared by all modules.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`RuntimeFailure` subclasses to exit code 2.
"""


class AmbiregError(Exception):
    pass


class ValidationError(AmbiregError):
    pass


class ParameterError(ValidationError, ValueError):
    """Invalid argument values or shapes."""


class FormatError(ValidationError):
    """A file on disk does not match its declared format."""


class ConfigError(ValidationError):
    pass


class RuntimeFailure(AmbiregError):
    pass


class NumericError(RuntimeFailure, ArithmeticError):
    """Non-finite values showed up where finite ones were required."""


class TrainingError(RuntimeFailure):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
