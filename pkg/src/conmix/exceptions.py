"""Semantic exception hierarchy.

Public functions raise these instead of bare ValueError/RuntimeError so that
callers (and the CLI exit-code mapping) can distinguish bad inputs from
numerical trouble from fitting failures.
"""


class ConmixError(Exception):
    """Base class for every error raised by this package."""


class DomainError(ConmixError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DataError(ConmixError, ValueError):
    """A dataset or configuration violates its contract (missing column,
    duplicate key, value outside the outcome support, ...)."""


class UnsupportedModelError(ConmixError, ValueError):
    """The requested family/structure combination is not supported."""


class StrongConjugacyError(UnsupportedModelError):
    """Raised when a predictor factor cannot be absorbed into the
    random-effect distribution (the beta case): the operation requires a
    random-effect family that stays in its own class under rescaling."""


class MomentExistenceError(DomainError):
    """A requested closed-form moment does not exist for these parameters."""


class NumericError(ConmixError, ArithmeticError):
    """A numerical computation failed (overflow guard, degenerate matrix,
    non-finite intermediate), with enough context to locate the culprit."""


class FitError(ConmixError, RuntimeError):
    """Maximum-likelihood fitting could not produce a usable result."""


class InitializationError(FitError):
    """The likelihood is not finite at the starting point."""
