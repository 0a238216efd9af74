"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric faults exit 4.
"""


class ConfigError(ValueError):
    """A configuration or argument violates its invariants."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """Inputs violate a precondition that is not about shape."""


class DegenerateInputError(ValueError):
    """Input is well-shaped but numerically unusable (e.g. a zero-norm row)."""


class DataError(ValueError):
    """A dataset or artifact on disk is malformed or inconsistent."""


class NumericFault(FloatingPointError):
    """NaN or Inf appeared where finite values are required."""
