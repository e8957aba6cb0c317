"""Exception types raised by the solvers."""


class CRBError(Exception):
    """Base class for all errors raised by ccrb."""


class DimensionMismatch(CRBError, ValueError):
    pass


class NotPositiveDefinite(CRBError):
    """A Cholesky pivot was not positive."""


class MonotonicityViolation(CRBError):
    """An MM iterate increased the objective, so the majorizer is invalid."""


class Divergence(CRBError):
    pass


class InternalError(CRBError):
    pass


class InvalidStep(CRBError):
    """Step parameter is outside the range that guarantees convergence."""


class NotInRange(CRBError):
    """Right-hand side is not in the range of a singular Fisher matrix."""


class RankDeficientConstraints(CRBError):
    pass


class SingularReducedFisher(CRBError):
    """The Fisher matrix restricted to the constraint nullspace is singular."""


class InfeasibleStart(CRBError):
    pass


class TruncationError(CRBError):
    """The load distribution could not be truncated within the size cap."""


class WeightUnderflow(CRBError, UserWarning):
    """Counter probabilities below 1e-300; used as a warning category when rows are dropped."""
