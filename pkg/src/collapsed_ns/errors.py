"""Exception types raised by the collapsed nested sampling stack."""


class CollapseError(Exception):
    """Base class for all package errors."""


class NonFiniteDerivative(CollapseError, FloatingPointError):
    """A Taylor coefficient became NaN or infinite.

    Attributes
    ----------
    index : tuple
        Location of the first offending entry as ``(order, *array_index)``.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InvalidDirection(CollapseError, ValueError):
    """Seed direction is not a unit vector."""


class NonFiniteObjective(CollapseError, FloatingPointError):
    """Objective evaluated to NaN or infinity at the starting point."""


class LineSearchStalled(CollapseError):
    """Backtracking line search failed to find sufficient decrease.

    Attributes
    ----------
    best : ndarray
        Best iterate found before stalling.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularWhitening(CollapseError, ValueError):
    """Whitening factor has a zero or non-finite pivot."""


class IndefiniteHessian(CollapseError):
    """Cholesky factorisation met a non-positive pivot.

    Attributes
    ----------
    pivot_index : int
        Index of the first failing pivot.
    pivot_value : float
        Value of the failing pivot (before the square root).
    """

    def __init__(self, message, pivot_index=None, pivot_value=None):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


class StructureViolation(CollapseError):
    """Hessian entry outside the declared sparsity pattern is not negligible."""


class NonConcaveDirection(CollapseError):
    """Second directional derivative is non-negative at the mode."""


class DegeneratePrior(CollapseError):
    """All initial live points have zero likelihood."""


class StuckSampler(CollapseError):
    """Constrained replacement failed after the retry budget.

    Attributes
    ----------
    diagnostics : dict
        Chain state at failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SliceCollapse(CollapseError):
    """Slice bracket shrank below the minimum width."""


class DegenerateWeights(CollapseError):
    """All importance weights are zero or non-finite."""


class QuadratureError(CollapseError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class NotFound(CollapseError, FileNotFoundError):
    """A required run artefact is missing."""


class ConfigError(CollapseError, ValueError):
    """Invalid run configuration."""
