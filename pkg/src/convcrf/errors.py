"""Exception hierarchy shared by every convcrf module."""


class ConvCrfError(Exception):
    """Base class for all errors raised by convcrf."""


class InvalidShapeError(ConvCrfError, ValueError):
    pass


class InvalidArgumentError(ConvCrfError, ValueError):
    pass


class ConfigurationError(ConvCrfError, ValueError):
    pass


class DataError(ConvCrfError, ValueError):
    pass


class UsageError(ConvCrfError, RuntimeError):
    pass


class UndefinedMetricError(ConvCrfError, ArithmeticError):
    pass


class TrainingDivergedError(ConvCrfError, FloatingPointError):
    """Raised when the training loss becomes non-finite.

    ``state`` carries a snapshot (step, params, last losses) for post-mortem
    inspection; the CLI writes it to disk before exiting.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
