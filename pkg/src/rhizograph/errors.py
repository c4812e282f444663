"""Exception hierarchy shared by all modules."""


class RhizoError(Exception):
    """Base class for every error raised by this package."""


class DataError(RhizoError, ValueError):
    """Invalid input dataset."""


class SchemaError(DataError):
    pass


class BoundsError(DataError):
    pass


class CompletenessError(DataError):
    pass


class PreconditionError(RhizoError, ValueError):
    """A caller violated a documented precondition."""


class ConfigError(RhizoError, ValueError):
    pass


class NumericError(RhizoError, ArithmeticError):
    """A numerical routine produced or met a non-finite / degenerate value."""


class DegeneracyError(NumericError):
    pass


class NonPositiveCurvature(NumericError):
    """Adaptive quadrature cannot be centred; fall back to the plain rule."""


class NonConvergenceError(RhizoError, RuntimeError):
    pass
