"""Exception hierarchy shared across the package.

CLI exit codes map onto these types: usage errors exit 2 (handled by
click), ValidationError exits 3, NumericError exits 4.
"""


class SemcalError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SemcalError):
    """Malformed or inconsistent input data (files, manifests, shapes)."""


class NumericError(SemcalError):
    """Numeric failure: NaN loss, invalid parameter value, divergence."""
