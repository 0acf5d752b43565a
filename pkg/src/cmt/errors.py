"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class CmtError(Exception):
    """Base class for library errors."""

    exit_code = 1


class ConfigError(CmtError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """Invalid numeric parameter (e.g. non-positive Beta shape, class index)."""


class ScheduleError(ConfigError):
    pass


class DimensionError(CmtError, ValueError):
    exit_code = 3


class DatasetError(CmtError):
    exit_code = 3


class ContractError(CmtError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(CmtError, FloatingPointError):
    """An operation produced NaN or Inf."""
