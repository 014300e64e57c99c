"""Exception types shared across the package."""


class StmapError(Exception):
    """Base class for all package-specific errors."""


class DataError(StmapError):
    """Malformed, out-of-range or inconsistent input data."""


class GeometryError(StmapError):
    """Degenerate or invalid geometry (collinear points, bad polygons,
    locations outside the mesh hull)."""


class ParameterError(StmapError):
    """Parameter outside its valid domain."""


class DegenerateVarianceError(StmapError):
    """A statistic that needs variation was given a constant input."""


class SingularityError(StmapError):
    """Exactly collinear design or singular weighted system."""


class NumericalError(StmapError):
    """Factorization or other numerical failure; message carries context."""


class CalibrationError(StmapError):
    """A prior tail-probability statement has no solution."""
