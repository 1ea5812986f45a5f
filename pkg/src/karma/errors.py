"""Shared exception types."""


class KarmaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KarmaError):
    """Invalid configuration or usage (CLI exit code 2)."""


class NumericError(KarmaError):
    """Non-finite values or numeric breakdown during compute (CLI exit code 3)."""
