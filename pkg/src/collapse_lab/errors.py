"""Exception hierarchy shared by all collapse_lab modules."""


class CollapseLabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CollapseLabError, ValueError):
    """Array shapes disagree with the declared dimensions."""


class PreconditionError(CollapseLabError, ValueError):
    """An operation was called outside the parameter range it supports."""


class DegenerateModel(CollapseLabError):
    """The regularized model only admits the trivial minimizer (W, H) = (0, 0)."""


class DegenerateStats(CollapseLabError):
    """A collapse metric is undefined because its normalizer vanishes."""


class StepCollapse(CollapseLabError):
    """The flow integrator exhausted its step halvings on a monotonicity check."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NoConvergence(CollapseLabError):
    """An iterative solve stopped at max_iters; ``solution`` holds the best iterate."""

    def __init__(self, message, solution=None, layer=None):
        super().__init__(message)
        self.solution = solution
        self.layer = layer


class BaseMismatch(CollapseLabError, ValueError):
    """Two operators were combined although they were built at different base points."""
