"""Failure classes shared across the package.

The CLI maps these to distinct exit codes, so anything user-facing should
raise one of them instead of a bare exception.
"""


class ConfigError(ValueError):
    """Invalid scenario configuration or violated operation precondition."""


class DataError(ValueError):
    """Dataset loading, partitioning, or shape problems."""


class SamplingError(DataError):
    """A mini-batch cannot be drawn from the shard as requested."""


class IdxParseError(DataError):
    """Malformed IDX file; the message names the offending field."""


class NumericsError(ArithmeticError):
    """Non-finite values produced during training; the run must abort."""
