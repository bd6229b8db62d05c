"""Exception hierarchy shared by every ctmix module."""


class CtmixError(Exception):
    """Base class for all package errors."""


class DomainError(CtmixError, ValueError):
    """An argument lies outside the domain of a function."""


class NumericError(CtmixError, ArithmeticError):
    """A numerical routine failed (factorization, root search, ...)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataError(CtmixError, ValueError):
    """Input data is malformed, degenerate or non-finite."""


class FitError(CtmixError, RuntimeError):
    """Model fitting failed.

    ``trace`` carries whatever progress log the fitter had accumulated
    (ELBO values, per-iteration log-likelihoods) at the time of failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ModelFormatError(CtmixError, ValueError):
    """A serialized model is malformed or has an unsupported schema version."""
