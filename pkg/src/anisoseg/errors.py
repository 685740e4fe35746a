"""Exception hierarchy shared across the package.

Each exception carries the CLI exit code it maps to: 2 for configuration or
schema problems, 3 for data problems, 4 for runtime and numerical failures.
"""


class AnisosegError(Exception):
    exit_code = 4


class ConfigurationError(AnisosegError, ValueError):
    exit_code = 2


class InvalidSpecError(ConfigurationError):
    """A synthetic-case spec that cannot be realised (e.g. ellipsoid does not fit)."""


class DataError(AnisosegError):
    exit_code = 3


class HeaderError(DataError):
    pass


class PayloadSizeError(DataError):
    pass


class UnsupportedDtypeError(DataError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class ShapeError(AnisosegError, ValueError):
    exit_code = 3


class UndefinedMetricError(AnisosegError, ValueError):
    exit_code = 3


class NonFiniteLossError(AnisosegError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None, batch_ids=None, components=None):
        super().__init__(message)
        self.step = step
        self.batch_ids = batch_ids
        self.components = components or {}
