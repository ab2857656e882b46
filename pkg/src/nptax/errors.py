"""Exception types shared across the package.

The CLI maps these onto exit codes, so library code should raise the most
specific one that applies.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (records, files, queries)."""


class ModelFormatError(DataError):
    """A model file that cannot be read back: bad tag, version, or layout."""


class NumericError(ArithmeticError):
    """A numeric routine failed to produce a usable result."""
