"""
Exception hierarchy for the normal-form toolkit.

Every error raised by the service layer derives from NormalFormError so the
command runner can turn it into a failing report record. Errors keep their
numerical context (points, parameters, singular values) as attributes.
"""
from typing import Any, Optional


class NormalFormError(Exception):
    """Base exception for all toolkit errors."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context

    def __getattr__(self, name: str) -> Any:
        context = self.__dict__.get("context", {})
        if name in context:
            return context[name]
        raise AttributeError(name)


# Expressions and charts

class ExpressionSyntaxError(NormalFormError):
    """Raised when an expression string does not follow the grammar."""
    pass


class OutOfDomain(NormalFormError):
    """Raised when a point lies outside the chart box."""
    pass


class UndefinedExpression(NormalFormError):
    """Raised on division by zero, sqrt of a negative number or a non-finite value."""
    pass


# Linear algebra of bivectors and Dirac structures

class SingularGauge(NormalFormError):
    """Raised when I + B·π is numerically singular."""
    pass


class DiracFrameError(NormalFormError):
    """Raised when a frame is not isotropic or not of full rank."""
    pass


class NotGraph(NormalFormError):
    """Raised when a Dirac structure is not the graph of a bivector at a point."""
    pass


class NotSubmersion(NormalFormError):
    """Raised when a derivative that should be onto has deficient row rank."""
    pass


class NotImmersion(NormalFormError):
    """Raised when an embedding derivative has deficient column rank."""
    pass


# Flows

class DomainEscape(NormalFormError):
    """Raised when a trajectory leaves the chart before the requested time."""

    def __init__(self, message: str, time: Optional[float] = None,
                 location: Optional[Any] = None, **context: Any):
        super().__init__(message, time=time, location=location, **context)


# Transversals

class NotTransversal(NormalFormError):
    """Raised when TX ⊕ π♯(N*X) fails to span the tangent space."""
    pass


class FrameDegeneracy(NormalFormError):
    """Raised when the reference coframe projects to a rank-deficient set."""
    pass


class NotOnTransversal(NormalFormError):
    """Raised when a point expected on a transversal cannot be located on it."""
    pass


class NotPoissonMap(NormalFormError):
    """Raised when a map fails to push one bivector onto the other."""
    pass


# Moser flows

class NotVanishingOnX(NormalFormError):
    """Raised when a 2-form difference does not vanish along the zero section."""
    pass


# Equivariant splitting

class SpectrumOnCut(NormalFormError):
    """Raised when a matrix has eigenvalues on or near (-inf, 0]."""
    pass


class NotInvertible(NormalFormError):
    """Raised when an averaged intertwiner is singular."""
    pass


class RankOddity(NormalFormError):
    """Raised when the numerical rank of a bivector is odd."""
    pass


class GroupActionError(NormalFormError):
    """Raised when a group action violates closure, fixed-point or invariance checks."""
    pass


# Configuration

class ConfigError(NormalFormError):
    """Raised when a run configuration cannot be parsed or validated."""

    def __init__(self, message: str, errors: Optional[Any] = None,
                 line: Optional[int] = None, **context: Any):
        super().__init__(message, errors=errors, line=line, **context)
