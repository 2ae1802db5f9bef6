"""Exception types shared across the package.

The CLI maps these onto exit codes: data/format problems exit 3,
numeric failures exit 4, usage errors exit 2 (argparse).
"""


class GridcastError(Exception):
    """Base class for all package errors."""


class ParseError(GridcastError):
    """A file could not be parsed. Carries the 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class SupportError(GridcastError):
    """A query point falls outside the interpolable interior of a raster."""


class NodataError(GridcastError):
    """A nodata cell appeared in the interpolation support."""


class DataError(GridcastError):
    """Input data violates a contract (bad header, degenerate statistics, ...)."""


class NumericError(GridcastError):
    """A numeric computation produced NaN/Inf or diverged."""
