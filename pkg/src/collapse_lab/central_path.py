"""Central-path loss ``L(H) = f(W*(H), H)``, its gradient, and the gradient flow on it."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import _backend
from .errors import PreconditionError, StepCollapse
from .metrics import MetricReport, metric_report
from .ufm import ModelParams, check_features, class_statistics, objective_plain, optimal_weights

SNAPSHOT_LIMIT = 10_000
MONOTONE_TOL = 1e-9


def central_loss(H, p: ModelParams) -> float:
    """Closed-form central-path loss in terms of the class covariances."""
    H = check_features(H, p.dims)
    return _backend.kernels.central_loss(H, p.dims.K, p.dims.n, p.lambda_w, p.lambda_h)


def central_loss_direct(H, p: ModelParams) -> float:
    """Plain objective evaluated at ``(W*(H), H)``; oracle for :func:`central_loss`."""
    return objective_plain(optimal_weights(H, p), H, p)


def central_gradient(H, p: ModelParams) -> np.ndarray:
    H = check_features(H, p.dims)
    return _backend.kernels.central_grad(H, p.dims.K, p.dims.n, p.lambda_w, p.lambda_h)


def central_loss_and_gradient(H, p: ModelParams):
    H = check_features(H, p.dims)
    return _backend.kernels.loss_and_grad(H, p.dims.K, p.dims.n, p.lambda_w, p.lambda_h)


def gradient_bound_constant(p: ModelParams) -> float:
    """``M`` with ``||grad L(H)||_F <= M ||H||_F`` for every ``H``."""
    return (3.0 / p.lambda_w + p.lambda_h) / p.dims.N


class CovarianceRates(NamedTuple):
    sigma_b: np.ndarray
    sigma_w: np.ndarray
    sigma_t_tilde: np.ndarray


def covariance_rates(H, p: ModelParams) -> CovarianceRates:
    """Time derivatives of ``Sigma_B``, ``Sigma_W``, ``tilde Sigma_T`` along the flow at ``H``."""
    stats = class_statistics(H, p.dims)
    K = p.dims.K
    d = p.dims.d
    A = stats.sigma_t_tilde + (p.lambda_w / K) * np.eye(d)
    C = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), np.eye(d))
    C_B = stats.sigma_b @ C
    Ct_B = stats.sigma_b_tilde @ C
    C_W = stats.sigma_w @ C
    eye = np.eye(d)
    lh2 = 2.0 * p.lambda_h
    d_b = (C_B @ (eye - Ct_B) + (eye - Ct_B.T) @ C_B.T) / K - lh2 * stats.sigma_b
    d_w = -(C_W @ Ct_B + Ct_B.T @ C_W.T) / K - lh2 * stats.sigma_w
    d_t = ((eye - Ct_B - C_W) @ Ct_B + Ct_B.T @ (eye - Ct_B.T - C_W.T)) / K - lh2 * stats.sigma_t_tilde
    return CovarianceRates(sigma_b=d_b, sigma_w=d_w, sigma_t_tilde=d_t)


@dataclass(frozen=True)
class FlowConfig:
    t_end: float = 5.0
    dt: float = 1e-3
    max_halvings: int = 20
    record_every: int = 100

    def __post_init__(self):
        if not self.t_end >= 0:
            raise PreconditionError("t_end must be nonnegative")
        if not self.dt > 0:
            raise PreconditionError("dt must be positive")
        if self.t_end > 0 and self.dt > self.t_end:
            raise PreconditionError("dt must not exceed t_end")
        if self.max_halvings < 0 or self.record_every < 1:
            raise PreconditionError("max_halvings >= 0 and record_every >= 1 required")


@dataclass(frozen=True)
class FlowSample:
    step: int
    t: float
    report: MetricReport
    loss: float
    digest: str
    H: np.ndarray | None = field(default=None, repr=False)

    @property
    def trSW(self):
        return self.report.trSW

    @property
    def trSB(self):
        return self.report.trSB

    @property
    def nc1_tilde(self):
        return self.report.nc1_tilde


@dataclass
class FlowTrace:
    lambda_h: float
    samples: list = field(default_factory=list)
    halvings: int = 0

    def column(self, name) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.samples], dtype=float)

    @property
    def t(self):
        return self.column("t")

    def weighted_trsw(self):
        """``exp(2 lambda_h t) tr Sigma_W`` at each sample."""
        return np.exp(2 * self.lambda_h * self.t) * self.column("trSW")

    def weighted_trsb(self):
        return np.exp(2 * self.lambda_h * self.t) * self.column("trSB")

    def decay_rate(self) -> float:
        """Least-squares slope of ``log tr Sigma_W`` against ``t``."""
        return float(np.polyfit(self.t, np.log(self.column("trSW")), 1)[0])

    def final(self) -> np.ndarray | None:
        return self.samples[-1].H


def _digest(H) -> str:
    return hashlib.sha256(np.ascontiguousarray(H).tobytes()).hexdigest()[:16]


def _sample(step, t, H, p, keep_full):
    W = optimal_weights(H, p)
    report = metric_report(H, p.dims, W=W, step=step, t=t)
    return FlowSample(
        step=step,
        t=t,
        report=report,
        loss=central_loss(H, p),
        digest=_digest(H),
        H=H.copy() if keep_full else None,
    )


def _weighted_trsw(H, p, t):
    stats = class_statistics(H, p.dims)
    return math.exp(2 * p.lambda_h * t) * float(np.trace(stats.sigma_w))


def flow_integrate(H0, p: ModelParams, cfg: FlowConfig = FlowConfig()) -> FlowTrace:
    """Integrate ``dH/dt = -K n grad L(H)`` with fixed-step RK4.

    A step whose result increases ``exp(2 lambda_h t) tr Sigma_W`` by more
    than ``MONOTONE_TOL`` (relative to ``1 + value``) is redone over the same
    interval with 2, 4, ... substeps, up to ``cfg.max_halvings`` halvings.
    """
    dims = p.dims
    H = check_features(H0, dims).copy()
    keep_full = dims.d * dims.N <= SNAPSHOT_LIMIT
    kern = _backend.kernels
    trace = FlowTrace(lambda_h=p.lambda_h)
    trace.samples.append(_sample(0, 0.0, H, p, keep_full))
    if cfg.t_end == 0:
        return trace

    nsteps = max(1, math.ceil(cfg.t_end / cfg.dt - 1e-9))
    tw = _weighted_trsw(H, p, 0.0)
    for step in range(1, nsteps + 1):
        t_prev = (step - 1) * cfg.dt
        t_next = cfg.t_end if step == nsteps else step * cfg.dt
        h = t_next - t_prev
        for halvings in range(cfg.max_halvings + 1):
            H_new = kern.rk4_step(H, dims.K, dims.n, p.lambda_w, p.lambda_h, h, 2**halvings)
            tw_new = _weighted_trsw(H_new, p, t_next)
            if tw_new <= tw + MONOTONE_TOL * (1.0 + tw):
                break
        else:
            raise StepCollapse(
                f"monotonicity check failed after {cfg.max_halvings} halvings at t={t_prev:.6g}", t=t_prev
            )
        trace.halvings += halvings
        H, tw = H_new, tw_new
        if step % cfg.record_every == 0 or step == nsteps:
            trace.samples.append(_sample(step, t_next, H, p, keep_full))
    return trace
