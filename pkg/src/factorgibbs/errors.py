"""Exception types raised across the package."""


class FactorGibbsError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(FactorGibbsError, ArithmeticError):
    """A Cholesky pivot was not strictly positive."""


class RankDeficient(FactorGibbsError, ArithmeticError):
    pass


class DomainError(FactorGibbsError, ValueError):
    """An argument lies outside the support of a density."""


class InvalidInitialPoints(FactorGibbsError, ValueError):
    pass


class InvalidTruth(FactorGibbsError, ValueError):
    pass


class DimensionMismatch(FactorGibbsError, ValueError):
    pass


class NonConvergence(FactorGibbsError, RuntimeError):
    pass


class ConfigError(FactorGibbsError, ValueError):
    pass
