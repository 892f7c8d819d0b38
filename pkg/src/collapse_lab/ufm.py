"""Unconstrained features model: domain types, objectives and exact minimizers.

Feature matrices are ``d x (K*n)`` arrays whose column ``k*n + i`` (0-based)
holds sample ``i`` of class ``k``.  Weight matrices are ``K x d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import DegenerateModel, PreconditionError, ShapeError

DEFAULT_COLLAPSE_TOL = 1e-8


@dataclass(frozen=True)
class Dims:
    K: int
    n: int
    d: int

    def __post_init__(self):
        for name in ("K", "n", "d"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise PreconditionError(f"{name} must be a positive integer, got {value!r}")

    def require_rich(self, strict=False):
        """Raise unless ``d >= K`` (``d > K`` when ``strict``)."""
        if self.d < self.K or (strict and self.d == self.K):
            op = ">" if strict else ">="
            raise PreconditionError(f"need d {op} K, got d={self.d}, K={self.K}")

    @property
    def N(self) -> int:
        """Total number of samples ``K*n``."""
        return self.K * self.n

    @property
    def feature_shape(self) -> tuple[int, int]:
        return (self.d, self.K * self.n)

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.K, self.d)


@dataclass(frozen=True)
class ModelParams:
    dims: Dims
    lambda_w: float
    lambda_h: float
    beta: float = 1e3

    def __post_init__(self):
        if not self.lambda_w > 0:
            raise PreconditionError(f"lambda_w must be positive, got {self.lambda_w}")
        if not self.lambda_h >= 0:
            raise PreconditionError(f"lambda_h must be nonnegative, got {self.lambda_h}")
        if not self.beta > 0:
            raise PreconditionError(f"beta must be positive, got {self.beta}")

    @property
    def c(self) -> float:
        return float(np.sqrt(self.lambda_h * self.lambda_w))

    @property
    def rho(self) -> float:
        """Squared norm of each collapsed class mean, ``(1 - c) sqrt(lambda_w / lambda_h)``."""
        if self.lambda_h <= 0:
            raise PreconditionError("rho is undefined for lambda_h = 0")
        return (1.0 - self.c) * float(np.sqrt(self.lambda_w / self.lambda_h))

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class CollapsedMinimizer:
    W_star: np.ndarray
    H_star: np.ndarray
    R: np.ndarray
    rho: float


@dataclass(frozen=True)
class ClassStats:
    dims: Dims
    means: np.ndarray  # d x K
    global_mean: np.ndarray  # d
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    sigma_t_tilde: np.ndarray
    sigma_b_tilde: np.ndarray
    sigma_w_per_class: np.ndarray = field(repr=False)  # K x d x d

    @property
    def centered_means(self) -> np.ndarray:
        return self.means - self.global_mean[:, None]


def check_features(H, dims: Dims) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    if H.shape != dims.feature_shape:
        raise ShapeError(f"feature matrix has shape {H.shape}, expected {dims.feature_shape}")
    if not np.all(np.isfinite(H)):
        raise ShapeError("feature matrix has non-finite entries")
    return H


def check_weights(W, dims: Dims) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    if W.shape != dims.weight_shape:
        raise ShapeError(f"weight matrix has shape {W.shape}, expected {dims.weight_shape}")
    if not np.all(np.isfinite(W)):
        raise ShapeError("weight matrix has non-finite entries")
    return W


def build_label_matrix(dims: Dims) -> np.ndarray:
    """One-hot label matrix ``I_K kron 1_n^T``."""
    return np.kron(np.eye(dims.K), np.ones((1, dims.n)))


def class_means(H, dims: Dims) -> np.ndarray:
    return H.reshape(dims.d, dims.K, dims.n).mean(axis=2)


def expand_means(Hbar, n: int) -> np.ndarray:
    """``Hbar kron 1_n^T``: repeat every class mean ``n`` times."""
    return np.repeat(Hbar, n, axis=1)


def objective_plain(W, H, p: ModelParams) -> float:
    dims = p.dims
    W = check_weights(W, dims)
    H = check_features(H, dims)
    N = dims.N
    resid = W @ H - build_label_matrix(dims)
    return float(
        0.5 * np.sum(resid**2) / N
        + 0.5 * p.lambda_w * np.sum(W**2) / dims.K
        + 0.5 * p.lambda_h * np.sum(H**2) / N
    )


def objective_prox(W, H, H0, p: ModelParams) -> float:
    H0 = check_features(H0, p.dims)
    H = check_features(H, p.dims)
    return objective_plain(W, H, p) + 0.5 * p.beta * float(np.sum((H - H0) ** 2)) / p.dims.N


def objective_gradients(W, H, p: ModelParams, H0=None):
    """Gradients ``(dW, dH)`` of the plain objective, or the proximal one when ``H0`` is given."""
    dims = p.dims
    N = dims.N
    resid = W @ H - build_label_matrix(dims)
    gW = resid @ H.T / N + p.lambda_w * W / dims.K
    gH = W.T @ resid / N + p.lambda_h * H / N
    if H0 is not None:
        gH = gH + p.beta * (H - H0) / N
    return gW, gH


def optimal_weights(H, p: ModelParams) -> np.ndarray:
    """Closed-form minimizer in W: ``Y H^T (H H^T + n lambda_w I)^{-1}``."""
    dims = p.dims
    H = check_features(H, dims)
    gram = H @ H.T
    gram[np.diag_indices_from(gram)] += dims.n * p.lambda_w
    # Y H^T = n * Hbar^T, and the shifted Gram is SPD
    rhs = dims.n * class_means(H, dims)
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs).T


def random_orthonormal(d: int, K: int, seed) -> np.ndarray:
    """Seeded ``d x K`` matrix with orthonormal columns, sign-fixed per column."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, K)))
    pivots = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[pivots, np.arange(K)])
    return Q * signs


def collapsed_minimizer(p: ModelParams, seed=0) -> CollapsedMinimizer:
    if p.lambda_h <= 0:
        raise PreconditionError("collapsed minimizer needs lambda_h > 0")
    if p.c >= 1:
        raise DegenerateModel(f"c = sqrt(lambda_h*lambda_w) = {p.c:.6g} >= 1: minimizer is (0, 0)")
    dims = p.dims
    dims.require_rich()
    rho = p.rho
    R = random_orthonormal(dims.d, dims.K, seed)
    H_star = np.sqrt(rho) * expand_means(R, dims.n)
    W_star = np.sqrt(p.lambda_h / p.lambda_w) * np.sqrt(rho) * R.T
    return CollapsedMinimizer(W_star=W_star, H_star=H_star, R=R, rho=rho)


def minimum_value(p: ModelParams) -> float:
    """Global minimum of the plain objective (1/2 when the model is degenerate)."""
    if p.lambda_h <= 0:
        raise PreconditionError("minimum value needs lambda_h > 0")
    if p.c >= 1:
        return 0.5
    m = collapsed_minimizer(p, seed=0)
    return objective_plain(m.W_star, m.H_star, p)


def is_collapsed(H, dims: Dims, tol: float = DEFAULT_COLLAPSE_TOL):
    """Check the collapse structure; returns ``(flag, diagnostics)``."""
    if not tol > 0:
        raise PreconditionError("tol must be positive")
    H = check_features(H, dims)
    Hbar = class_means(H, dims)
    dev = np.linalg.norm(H - expand_means(Hbar, dims.n), axis=0).reshape(dims.K, dims.n)
    mean_norms = np.linalg.norm(Hbar, axis=0)
    within_ok = bool(np.all(dev <= tol * (1.0 + mean_norms[:, None])))

    M = Hbar - Hbar.mean(axis=1, keepdims=True)
    G = M.T @ M
    K = dims.K
    if K > 1:
        rho_hat = float(np.mean(np.diag(G))) * K / (K - 1)
    else:
        rho_hat = 0.0
    target = rho_hat * (np.eye(K) - np.ones((K, K)) / K)
    gram_err = float(np.linalg.norm(G - target))
    gram_ok = rho_hat > tol and gram_err <= tol * (1.0 + rho_hat)
    diagnostics = {
        "max_within_deviation": float(dev.max()),
        "rho_hat": rho_hat,
        "gram_error": gram_err,
        "within_ok": within_ok,
        "gram_ok": bool(gram_ok),
    }
    return within_ok and bool(gram_ok), diagnostics


def class_statistics(H, dims: Dims) -> ClassStats:
    H = check_features(H, dims)
    d, K, n = dims.d, dims.K, dims.n
    N = dims.N
    blocks = H.reshape(d, K, n)
    means = blocks.mean(axis=2)
    global_mean = means.mean(axis=1)
    dev = blocks - means[:, :, None]
    per_class = np.einsum("ikj,lkj->kil", dev, dev) / n
    sigma_w = per_class.mean(axis=0)
    centered = means - global_mean[:, None]
    sigma_b = centered @ centered.T / K
    sigma_t_tilde = H @ H.T / N
    sigma_b_tilde = means @ means.T / K
    return ClassStats(
        dims=dims,
        means=means,
        global_mean=global_mean,
        sigma_w=sigma_w,
        sigma_b=sigma_b,
        sigma_t_tilde=sigma_t_tilde,
        sigma_b_tilde=sigma_b_tilde,
        sigma_w_per_class=per_class,
    )


def minimize_numeric(p: ModelParams, seed=0, H0=None, scale=1.0, gtol=1e-13, maxiter=50000, start=None):
    """Jointly minimize the plain (or proximal, when ``H0`` is given) objective with L-BFGS.

    Starts from a seeded Gaussian point of standard deviation ``scale``, shifted
    by ``start = (W, H)`` when given. Used as an independent oracle for the
    closed-form results, so it never touches the central-path code.
    Returns ``(W, H, value)``.
    """
    dims = p.dims
    K, d, N = dims.K, dims.d, dims.N
    nW = K * d
    rng = np.random.default_rng(seed)
    x0 = scale * rng.standard_normal(nW + d * N)
    if start is not None:
        x0 += np.concatenate([check_weights(start[0], dims).ravel(), check_features(start[1], dims).ravel()])

    def unpack(x):
        return x[:nW].reshape(K, d), x[nW:].reshape(d, N)

    def fun(x):
        W, H = unpack(x)
        value = objective_plain(W, H, p)
        if H0 is not None:
            value += 0.5 * p.beta * float(np.sum((H - H0) ** 2)) / N
        gW, gH = objective_gradients(W, H, p, H0=H0)
        return value, np.concatenate([gW.ravel(), gH.ravel()])

    res = scipy.optimize.minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter, "maxfun": 2 * maxiter, "gtol": gtol, "ftol": 1e-16, "maxcor": 30},
    )
    W, H = unpack(res.x)
    return W, H, float(res.fun)
