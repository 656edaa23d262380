"""Exception types shared across the package.

The CLI maps these onto exit codes, so anything user-facing should raise
one of them rather than a bare ValueError.
"""


class FewshotError(Exception):
    """Base class for package errors."""


class ShapeError(FewshotError):
    """Tensor arguments have incompatible or unsupported shapes."""


class GraphError(FewshotError):
    """Misuse of the recording graph (mixed graphs, non-scalar loss, ...)."""


class CapacityError(FewshotError):
    """A request exceeds what the data or model can provide."""


class ConfigError(FewshotError):
    """Invalid run configuration (unknown key, bad value, bad usage)."""


class DataError(FewshotError):
    """Dataset loading or consistency failure."""


class NumericError(FewshotError):
    """Numerical failure (NaN/Inf loss, divergence)."""
