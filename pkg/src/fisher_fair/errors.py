"""Exception types shared across the package."""


class FisherFairError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FisherFairError):
    """An instance document or argument violates a structural invariant."""


class DomainError(FisherFairError):
    """A numeric argument lies outside the domain of the operation."""


class UnreachableUtility(FisherFairError):
    """A cut was asked to deliver more utility than the segment holds."""


class DegeneratePiece(FisherFairError):
    """A cut on an (almost) identically-zero piece cannot deliver positive utility."""


class InfeasibleUtilities(FisherFairError):
    """A utility vector is not attainable by any allocation of the interval."""


class NumericalBreakdown(FisherFairError):
    """The ellipsoid shape matrix lost positive definiteness beyond repair."""


class NotConverged(FisherFairError):
    """A solver ran out of iterations; carries the best iterate found.

    The ``result`` attribute holds the best solution object (solver specific)
    and ``gap`` its certificate value, so callers can still inspect or save it.
    """

    def __init__(self, message, result=None, gap=None):
        super().__init__(message)
        self.result = result
        self.gap = gap
