"""Exception types shared across the package.

Two failure classes are distinguished because the command line maps them to
different exit codes: bad inputs (exit 2) versus numerical breakdown during
an otherwise valid computation (exit 3).
"""


class ValidationError(ValueError):
    """Invalid data, configuration, or argument outside its domain."""


class NumericalError(RuntimeError):
    """A numerical operation failed beyond recovery (e.g. Cholesky breakdown)."""
