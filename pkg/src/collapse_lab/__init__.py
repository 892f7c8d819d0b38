"""Perturbed unconstrained-features model: minimizers, central-path flow, linear response."""
from ._backend import BACKEND
from .errors import (
    BaseMismatch,
    CollapseLabError,
    DegenerateModel,
    DegenerateStats,
    NoConvergence,
    PreconditionError,
    ShapeError,
    StepCollapse,
)
from .ufm import (
    ClassStats,
    CollapsedMinimizer,
    Dims,
    ModelParams,
    build_label_matrix,
    class_statistics,
    collapsed_minimizer,
    is_collapsed,
    objective_plain,
    objective_prox,
    optimal_weights,
)

__version__ = "0.1.0"
