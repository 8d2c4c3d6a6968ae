"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/input problems exit 2,
training-contract failures exit 3, numeric failures exit 4.
"""


class MMUnlearnError(Exception):
    """Base class for all package errors."""


class DimensionError(MMUnlearnError):
    """Operand shapes are incompatible."""


class ContractError(MMUnlearnError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(MMUnlearnError):
    """Invalid configuration value or combination."""


class InputError(MMUnlearnError):
    """Malformed runtime input (out-of-vocab token, bad id, empty sequence)."""


class DegenerateInputError(MMUnlearnError):
    """Numerically degenerate input (e.g. rank-deficient matrix)."""


class NumericError(MMUnlearnError):
    """Numerical failure: non-convergence, NaN/Inf, domain error."""


class TrainingFailure(MMUnlearnError):
    """A training stage did not meet its contract (e.g. memorization threshold)."""
