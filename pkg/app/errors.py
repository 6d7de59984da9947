class BPSolveError(Exception):
    """Base class for every error raised by the solver."""


class FieldFormatError(BPSolveError, ValueError):
    """Malformed BPF1 file (magic, dims or payload)."""


class DimensionError(BPSolveError, ValueError):
    """Fields, plans or problems defined on different grids."""


class SizeError(BPSolveError, ValueError):
    """Input too large for an O(n^6) oracle."""


class DegenerateInputError(BPSolveError, ValueError):
    """Zero field or zero constraint value where a nonzero one is required."""


class GeometryError(BPSolveError, ValueError):
    """Bump support or well position does not fit the grid."""


class PreconditionError(BPSolveError, RuntimeError):
    """An operation was called on input that violates its contract."""


class ConfigError(BPSolveError, ValueError):
    """Invalid run configuration."""
