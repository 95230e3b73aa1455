"""Shared exception types."""


class FelError(Exception):
    """Base class for runtime failures in the lab."""


class ConfigError(FelError):
    """Bad or missing configuration; maps to CLI exit code 2."""


class NonFiniteError(FelError):
    """NaN/Inf encountered where finite values are required."""


class UnimplementedPrimitiveError(FelError):
    """A primitive outside the substrate contract was requested."""
