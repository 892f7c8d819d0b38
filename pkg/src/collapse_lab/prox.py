"""Proximal model solver, implicit-step checks, Lipschitz checks and layer-wise stacking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .central_path import central_gradient, central_loss_and_gradient, gradient_bound_constant
from .errors import NoConvergence, PreconditionError
from .metrics import MetricReport, metric_report
from .ufm import ModelParams, check_features, collapsed_minimizer, objective_prox, optimal_weights

INIT_CHOICES = ("from_H0", "from_collapsed", "custom")
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SolveConfig:
    grad_tol: float = 1e-10
    max_iters: int = 20000
    init: str = "from_H0"
    shrink: float = 0.5
    armijo: float = 1e-4
    seed: int = 0
    H_init: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise PreconditionError("grad_tol must be positive")
        if self.max_iters < 1:
            raise PreconditionError("max_iters must be at least 1")
        if self.init not in INIT_CHOICES:
            raise PreconditionError(f"init must be one of {INIT_CHOICES}, got {self.init!r}")
        if self.init == "custom" and self.H_init is None:
            raise PreconditionError("init='custom' needs H_init")
        if not 0 < self.shrink < 1 or not 0 < self.armijo < 1:
            raise PreconditionError("line search needs 0 < shrink < 1 and 0 < armijo < 1")


@dataclass(frozen=True)
class ProxSolution:
    H_star: np.ndarray
    W_star: np.ndarray
    residual: float  # ||H* - H0 + (Kn/beta) grad L(H*)||_F
    iters: int
    objective: float
    grad_norm: float  # ||grad phi(H*)||_F
    converged: bool = True


def _start(H0, p, cfg):
    if cfg.init == "from_H0":
        return H0.copy()
    if cfg.init == "from_collapsed":
        return collapsed_minimizer(p, seed=cfg.seed).H_star.copy()
    return check_features(cfg.H_init, p.dims).copy()


def solve_prox(H0, p: ModelParams, cfg: SolveConfig = SolveConfig()) -> ProxSolution:
    """Minimize ``phi(H) = L(H) + beta/(2Kn) ||H - H0||^2`` by gradient descent with Armijo backtracking.

    Stops once ``||grad phi||_F <= cfg.grad_tol``. The first trial step is
    ``Kn/beta``, the inverse curvature of the proximal term; later trial steps
    use the Barzilai-Borwein estimate of the local inverse curvature.
    """
    dims = p.dims
    H0 = check_features(H0, dims)
    N = dims.N
    pull = p.beta / N
    H = _start(H0, p, cfg)

    def phi(X):
        loss, g = central_loss_and_gradient(X, p)
        D = X - H0
        return loss + 0.5 * pull * float(np.sum(D * D)), g + pull * D, g

    f, G, gL = phi(H)
    step0 = 1.0 / pull
    step = step0
    gnorm = float(np.linalg.norm(G))
    it = 0
    stalled = False
    while gnorm > cfg.grad_tol and it < cfg.max_iters:
        it += 1
        gg = gnorm * gnorm
        slack = 4 * _EPS * (abs(f) + 1.0)
        while True:
            H_try = H - step * G
            f_try, G_try, gL_try = phi(H_try)
            if f_try <= f - cfg.armijo * step * gg + slack:
                break
            step *= cfg.shrink
            if step < 1e-16 * step0:
                stalled = True
                break
        if stalled:
            break
        S, D = H_try - H, G_try - G
        H, f, G, gL = H_try, f_try, G_try, gL_try
        gnorm = float(np.linalg.norm(G))
        # Barzilai-Borwein trial step; falls back to the natural scale on nonpositive curvature
        sd = float(np.sum(S * D))
        step = float(np.sum(S * S)) / sd if sd > 0 else step0
        step = min(max(step, 1e-6 * step0), 1e6 * step0)

    sol = ProxSolution(
        H_star=H,
        W_star=optimal_weights(H, p),
        residual=gnorm / pull,
        iters=it,
        objective=f,
        grad_norm=gnorm,
        converged=gnorm <= cfg.grad_tol,
    )
    if not sol.converged:
        why = "line search stalled" if stalled else "iteration limit reached"
        raise NoConvergence(f"||grad phi|| = {gnorm:.3e} after {it} iterations ({why})", solution=sol)
    return sol


def prox_objective_at(sol: ProxSolution, H0, p: ModelParams) -> float:
    """Proximal objective of the solution's ``(W*, H*)`` pair."""
    return objective_prox(sol.W_star, sol.H_star, H0, p)


@dataclass(frozen=True)
class ImplicitStepReport:
    absolute: float
    relative: float
    step_norm: float


def implicit_step_check(H0, p: ModelParams, sol: ProxSolution) -> ImplicitStepReport:
    """Residual of ``beta (H* - H0) + Kn grad L(H*) = 0``.

    ``relative`` divides by ``Kn (1 + ||grad L(H*)||)``, which makes it directly
    comparable to the solver's ``grad_tol``.
    """
    H0 = check_features(H0, p.dims)
    N = p.dims.N
    g = central_gradient(sol.H_star, p)
    r = float(np.linalg.norm(p.beta * (sol.H_star - H0) + N * g))
    return ImplicitStepReport(
        absolute=r,
        relative=r / (N * (1.0 + float(np.linalg.norm(g)))),
        step_norm=float(np.linalg.norm(sol.H_star - H0)),
    )


def euler_predictor(H0, p: ModelParams) -> np.ndarray:
    """Explicit step ``H0 - (Kn/beta) grad L(H0)``."""
    H0 = check_features(H0, p.dims)
    return H0 - (p.dims.N / p.beta) * central_gradient(H0, p)


def displacement_bound(H0, p: ModelParams) -> float:
    """Upper bound on ``||H* - H0||_F`` valid when ``beta > Kn M``."""
    M = gradient_bound_constant(p)
    ratio = p.beta / (p.dims.N * M)
    if ratio <= 1:
        raise PreconditionError(f"displacement bound needs beta > Kn M = {p.dims.N * M:.6g}")
    return float(np.linalg.norm(H0)) / (ratio - 1.0)


def map_lipschitz_constant(p: ModelParams) -> float:
    return 1.0 / (1.0 - 11.0 * p.lambda_h / p.beta)


def gradient_lipschitz_constant(p: ModelParams) -> float:
    return 11.0 * p.lambda_h / p.dims.N


@dataclass
class LipschitzReport:
    map_constant: float
    grad_constant: float
    map_ratios: list = field(default_factory=list)
    grad_ratios: list = field(default_factory=list)
    map_violations: int = 0
    grad_violations: int = 0

    @property
    def ok(self) -> bool:
        return self.map_violations == 0 and self.grad_violations == 0


def lipschitz_map_check(pairs, p: ModelParams, cfg: SolveConfig = SolveConfig()) -> LipschitzReport:
    """Check both Lipschitz bounds on every pair ``(H0, H0_tilde)``.

    The map bound gets ``2 grad_tol`` of slack for the inexact solves. The
    gradient bound is checked on the same pairs of inputs.
    """
    if not p.beta > 11.0 * p.lambda_h:
        raise PreconditionError("need beta > 11 lambda_h")
    if not p.lambda_w * p.lambda_h < 1:
        raise PreconditionError("need lambda_w * lambda_h < 1")
    rep = LipschitzReport(map_lipschitz_constant(p), gradient_lipschitz_constant(p))
    for H0, H1 in pairs:
        H0 = check_features(H0, p.dims)
        H1 = check_features(H1, p.dims)
        gap = float(np.linalg.norm(H0 - H1))
        s0 = solve_prox(H0, p, cfg).H_star
        s1 = solve_prox(H1, p, cfg).H_star
        out = float(np.linalg.norm(s0 - s1))
        if out > rep.map_constant * gap + 2 * cfg.grad_tol:
            rep.map_violations += 1
        dg = float(np.linalg.norm(central_gradient(H0, p) - central_gradient(H1, p)))
        if dg > rep.grad_constant * gap * (1 + 1e-12):
            rep.grad_violations += 1
        if gap > 0:
            rep.map_ratios.append(out / gap)
            rep.grad_ratios.append(dg / gap)
    return rep


def layerwise_stack(H0, p: ModelParams, depth: int, cfg: SolveConfig = SolveConfig()) -> list[MetricReport]:
    """Apply the proximal solve ``depth`` times, feeding each output back as the next input.

    Returns one report per layer, layer 0 being ``H0`` itself; ``step`` holds the layer index.
    """
    if depth < 0:
        raise PreconditionError("depth must be nonnegative")
    H = check_features(H0, p.dims)
    reports = [metric_report(H, p.dims, W=optimal_weights(H, p), step=0)]
    for layer in range(1, depth + 1):
        try:
            sol = solve_prox(H, p, cfg)
        except NoConvergence as exc:
            exc.layer = layer
            raise
        H = sol.H_star
        reports.append(metric_report(H, p.dims, W=sol.W_star, step=layer))
    return reports
