"""Exception hierarchy shared across the package.

Exit codes follow the CLI contract: 2 config error, 3 data error,
4 numerical failure.
"""


class EndosegError(Exception):
    exit_code = 1


class ConfigError(EndosegError):
    """Invalid configuration, arguments, or precondition violation."""

    exit_code = 2


class DataError(EndosegError):
    """Missing, malformed, or inconsistent input data."""

    exit_code = 3


class NumericalError(EndosegError):
    """Degenerate numerical input or a solver that failed to converge."""

    exit_code = 4
