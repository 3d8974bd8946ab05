"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError and subclasses are exit 2,
NumericOverflowError is exit 3.
"""


class FraudlensError(Exception):
    """Base class for package-specific failures."""


class DataError(FraudlensError):
    """Bad input data, schema, or configuration."""


class SchemaError(DataError):
    """CSV header or payload does not match the documented schema."""


class RowError(DataError):
    """A specific input row could not be parsed or mapped."""


class DatasetError(DataError):
    """Dataset-level violation, e.g. duplicated transaction ids."""


class ConfigError(DataError):
    """Invalid or infeasible configuration."""


class TargetNotFoundError(DataError, KeyError):
    """Referenced node/transaction id does not exist."""


class MetricError(DataError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class SizeError(DataError):
    """Instance too large for exact enumeration."""


class CompositionError(DataError):
    """Explanation parts do not refer to the same target."""


class NumericOverflowError(FraudlensError, ArithmeticError):
    """A numeric primitive produced a non-finite value."""

    def __init__(self, op: str):
        super().__init__(f"non-finite result in primitive '{op}'")
        self.op = op
