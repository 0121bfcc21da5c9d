"""Exception hierarchy shared by all modules.

The CLI maps :class:`InputError` to exit code 1 and :class:`NumericalError`
to exit code 2.
"""


class FuniformError(Exception):
    """Base class for all package errors."""


class InputError(FuniformError, ValueError):
    """Invalid argument, domain violation or malformed input file."""


class UnsupportedMetricError(InputError):
    """Metric does not satisfy the assumptions of an algorithm."""


class NumericalError(FuniformError, ArithmeticError):
    """A numerical routine failed to reach its requested accuracy."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved
