"""Exception hierarchy. Exit codes: config 2, data 3, numerical 4."""


class DemandMlError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(DemandMlError):
    """A parameter or configuration value is invalid or inconsistent."""

    exit_code = 2


class DataError(DemandMlError):
    """Input data violates a structural or domain requirement."""

    exit_code = 3


class NumericalError(DemandMlError):
    """A computation failed for numerical reasons (rank, degeneracy)."""

    exit_code = 4
