"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericError exits 3.
"""


class DdfError(Exception):
    """Base class for all toolkit errors."""


class DataError(DdfError):
    """Unreadable, malformed, or inconsistent input data (files, meshes)."""


class NumericError(DdfError):
    """Numerical failure (NaN loss, degenerate gradient)."""
