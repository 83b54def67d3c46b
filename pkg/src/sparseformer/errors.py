"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class SparseformerError(Exception):
    pass


class ConfigError(SparseformerError):
    """Invalid configuration: bad field values, unknown keys, exhausted tables."""


class DimensionError(SparseformerError, ValueError):
    """Operand shapes are incompatible. Message names both shapes."""


class DataError(SparseformerError):
    """Malformed dataset files, out-of-range labels, empty splits, shot shortage."""


class MetricError(DataError):
    """Metric undefined or fed out-of-range class ids."""


class NumericError(SparseformerError):
    """Non-finite values where finite ones are required, or a rejected update."""
