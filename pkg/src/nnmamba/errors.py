"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where it is not allowed."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid model, training or dataset configuration."""


class FormatError(ValueError):
    """A binary file is malformed (bad magic, truncated payload, ...)."""


class UndefinedMetricError(ValueError):
    """A metric has no value for the given inputs (empty mask, one class, ...)."""
