"""Neural-collapse distance metrics (NC1 variants, NC2, NC3)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStats, PreconditionError
from .ufm import ClassStats, Dims, class_statistics

DEFAULT_PINV_TOL = 1e-10
_TRACE_EPS = 1e-300

METRIC_COLUMNS = ("step", "t", "nc1_tilde", "nc1_fisher", "nc2", "nc3", "trSW", "trSB")


@dataclass(frozen=True)
class MetricReport:
    nc1_tilde: float
    nc1_fisher: float
    nc1_per_class: np.ndarray
    nc2: float
    nc3: float | None
    trSW: float
    trSB: float
    step: int = 0
    t: float = 0.0

    def row(self) -> list:
        return [self.step, self.t, self.nc1_tilde, self.nc1_fisher, self.nc2,
                "" if self.nc3 is None else self.nc3, self.trSW, self.trSB]


def _simplex_etf(K: int) -> np.ndarray:
    """Centered identity scaled to unit Frobenius norm."""
    return (np.eye(K) - np.ones((K, K)) / K) / np.sqrt(K - 1)


def pinv_truncated(S, pinv_tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """SVD pseudoinverse dropping singular values below ``pinv_tol * sigma_max``."""
    if not pinv_tol > 0:
        raise PreconditionError("pinv_tol must be positive")
    U, s, Vt = np.linalg.svd(S)
    if s.size == 0 or s[0] == 0:
        raise DegenerateStats("between-class covariance is zero")
    keep = s >= pinv_tol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def nc1_tilde(stats: ClassStats) -> float:
    """``tr(Sigma_W) / tr(Sigma_B)``."""
    tr_b = float(np.trace(stats.sigma_b))
    if tr_b <= _TRACE_EPS:
        raise DegenerateStats("tr(Sigma_B) vanishes: all class means coincide")
    return float(np.trace(stats.sigma_w)) / tr_b


def nc1_per_class(stats: ClassStats, pinv_tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    K = stats.dims.K
    pinv = pinv_truncated(stats.sigma_b, pinv_tol)
    return np.einsum("kij,ji->k", stats.sigma_w_per_class, pinv) / K


def nc1_fisher(stats: ClassStats, pinv_tol: float = DEFAULT_PINV_TOL) -> float:
    """``(1/K) tr(Sigma_W Sigma_B^+)``; equals the mean of :func:`nc1_per_class`."""
    return float(np.mean(nc1_per_class(stats, pinv_tol)))


def nc2(stats: ClassStats) -> float:
    M = stats.centered_means
    G = M.T @ M
    norm = np.linalg.norm(G)
    if norm <= _TRACE_EPS:
        raise DegenerateStats("Gram matrix of centered class means is zero")
    return float(np.linalg.norm(G / norm - _simplex_etf(stats.dims.K)))


def nc3(W, stats: ClassStats) -> float:
    P = np.asarray(W, dtype=float) @ stats.centered_means
    norm = np.linalg.norm(P)
    if norm <= _TRACE_EPS:
        raise DegenerateStats("W times centered class means is zero")
    return float(np.linalg.norm(P / norm - _simplex_etf(stats.dims.K)))


def metric_report(H, dims: Dims, W=None, step=0, t=0.0, pinv_tol=DEFAULT_PINV_TOL) -> MetricReport:
    stats = class_statistics(H, dims)
    per_class = nc1_per_class(stats, pinv_tol)
    return MetricReport(
        nc1_tilde=nc1_tilde(stats),
        nc1_fisher=float(np.mean(per_class)),
        nc1_per_class=per_class,
        nc2=nc2(stats),
        nc3=None if W is None else nc3(W, stats),
        trSW=float(np.trace(stats.sigma_w)),
        trSB=float(np.trace(stats.sigma_b)),
        step=step,
        t=t,
    )
