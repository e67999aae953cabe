"""Exception types raised across the package."""


class NRDFError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(NRDFError, ValueError):
    pass


class StepTooLarge(NRDFError, ValueError):
    """A tangent step reached the injectivity bound of the exponential map."""


class NearSingularTransport(NRDFError, ValueError):
    """egrad2rgrad called at (or near) the antipode of the identity."""


class GuardExhausted(NRDFError, RuntimeError):
    pass


class MalformedFile(NRDFError, ValueError):
    pass


class NonUnitQuaternion(NRDFError, ValueError):
    pass


class EmptyDataset(NRDFError, ValueError):
    pass


class TooFewPoses(NRDFError, ValueError):
    pass


class DivergedTraining(NRDFError, FloatingPointError):
    pass


class MalformedCheckpoint(NRDFError, ValueError):
    pass


class ArchitectureMismatch(NRDFError, ValueError):
    pass


class VanishingGradient(NRDFError, ArithmeticError):
    pass


class MaxItersExceeded(NRDFError, RuntimeError):
    """Iteration budget exhausted; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None, iterations=None):
        super().__init__(message)
        self.best = best
        self.iterations = iterations
