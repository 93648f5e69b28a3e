"""
Multi-task Regularization Networks - Error Hierarchy
====================================================

Every failure raised by the library derives from :class:`MultitaskError` so
the command-line layer can translate it into an exit status.
"""


class MultitaskError(Exception):
    """Base class for all library errors."""


class ArgumentError(MultitaskError, ValueError):
    """An argument is malformed, out of range or inconsistent."""


class KernelDomainError(MultitaskError, KeyError):
    """A point lies outside the domain of a lookup kernel."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else "point outside kernel domain"


class NumericalError(MultitaskError, ArithmeticError):
    """A factorization or eigendecomposition could not be carried out."""


class RangeError(MultitaskError, ValueError):
    """A function has a component outside the retained spectral span."""


class PreconditionError(MultitaskError):
    """A documented precondition of an operation does not hold."""


class HypothesisViolation(PreconditionError, ArgumentError):
    """A hypothesis of a learning-rate theorem does not hold.

    Raised for a non-universal kernel, kappa < 1 or log(2/delta) < 1.
    """

    def __init__(self, hypothesis: str, message: str):
        super().__init__(message)
        self.hypothesis = hypothesis
