"""Exception types shared by the samplers and the command line front end."""


class DomainError(ValueError):
    """Raised when an input lies outside the domain where an operation is defined."""


class NumericError(ArithmeticError):
    """Raised when a quadrature or root search fails to reach its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class BudgetExceeded(RuntimeError):
    """Raised when a sampler would need more nodes than its budget allows.

    The partially built object, if any, is attached as ``partial`` so callers
    can decide between rejecting, retrying or reporting a truncation.
    ``frontier`` counts the lineages left open when sampling stopped.
    """

    def __init__(self, message, partial=None, frontier=None):
        super().__init__(message)
        self.partial = partial
        self.frontier = frontier
