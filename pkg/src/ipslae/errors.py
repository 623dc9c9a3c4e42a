"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class IpslaeError(Exception):
    exit_code = 1


class ConfigError(IpslaeError, ValueError):
    """Invalid parameters, grids, or configuration files."""

    exit_code = 2


class DataError(IpslaeError, ValueError):
    """Unreadable, malformed, or degenerate input data."""

    exit_code = 3


class NumericalError(IpslaeError, ArithmeticError):
    """Singular systems, non-finite results, failed factorizations."""

    exit_code = 4
