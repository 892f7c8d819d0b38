"""Linear response of the proximal minimizer to perturbations of ``H0``.

Vectorization is column-stack everywhere: ``vec(H)[a + d*j] = H[a, j]`` and
``vec(W)[k + K*i] = W[k, i]``.  With features grouped by class, the block
of ``F`` for classes ``(k, kt)`` occupies rows ``(k-1)dn : k dn`` and columns
``(kt-1)dn : kt dn`` (class indices are 1-based, as in the CSV output).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .errors import BaseMismatch, PreconditionError
from .ufm import (
    ModelParams,
    build_label_matrix,
    check_features,
    check_weights,
    class_means,
    is_collapsed,
    optimal_weights,
)

EXPLICIT_LIMIT = 2000
RANK_TOL = 1e-10
SPECTRUM_COLUMNS = ("k", "ktilde", "index", "sigma_numeric", "sigma_analytic", "abs_err")


def _vec(X):
    return np.asarray(X).ravel(order="F")


def _unvec(v, shape):
    return np.asarray(v).reshape(shape, order="F")


@dataclass(frozen=True, eq=False)
class HessianBlocks:
    """Second derivatives of the proximal objective at ``(W, H)``.

    ``WH`` is the derivative of ``grad_H f`` with respect to ``vec(W)``
    (``dnK x Kd``); its transpose is the derivative of ``grad_W f`` with
    respect to ``vec(H)``.  Dense blocks are built on first access.
    """

    W: np.ndarray
    H: np.ndarray
    p: ModelParams

    @cached_property
    def residual(self):
        return self.W @ self.H - build_label_matrix(self.p.dims)

    @cached_property
    def HH(self):
        dims, p = self.p.dims, self.p
        N = dims.N
        return np.kron(np.eye(N), self.W.T @ self.W) / N + ((p.lambda_h + p.beta) / N) * np.eye(dims.d * N)

    @cached_property
    def WW(self):
        dims, p = self.p.dims, self.p
        return np.kron(self.H @ self.H.T, np.eye(dims.K)) / dims.N + (p.lambda_w / dims.K) * np.eye(dims.K * dims.d)

    @cached_property
    def E(self):
        d, K, N = self.p.dims.d, self.p.dims.K, self.p.dims.N
        R = self.residual
        E = np.zeros((d * N, K * d))
        for i in range(d):
            for k in range(K):
                col = np.zeros((d, N))
                col[i] = R[k]
                E[:, i * K + k] = _vec(col)
        return E

    @cached_property
    def WH(self):
        return (self.E + np.kron(self.H.T, self.W.T)) / self.p.dims.N

    # matrix-free products, used by the operator form of the response
    def hh_apply(self, V):
        N = self.p.dims.N
        return (self.W.T @ (self.W @ V) + (self.p.lambda_h + self.p.beta) * V) / N

    def wh_apply(self, dW):
        return (dW.T @ self.residual + self.W.T @ dW @ self.H) / self.p.dims.N

    def wh_adjoint(self, V):
        return (self.residual @ V.T + self.W @ V @ self.H.T) / self.p.dims.N

    def ww_solve(self, U):
        dims = self.p.dims
        G = self.H @ self.H.T
        G[np.diag_indices_from(G)] += dims.n * self.p.lambda_w
        return dims.N * scipy.linalg.cho_solve(scipy.linalg.cho_factor(G), U.T).T


def hessian_blocks(W, H, p: ModelParams) -> HessianBlocks:
    W = check_weights(W, p.dims).copy()
    H = check_features(H, p.dims).copy()
    return HessianBlocks(W=W, H=H, p=p)


def first_derivatives(W, H, H0, p: ModelParams):
    """``(grad_W f, grad_H f)`` of the proximal objective, as matrices."""
    N = p.dims.N
    R = W @ H - build_label_matrix(p.dims)
    gW = R @ H.T / N + p.lambda_w * W / p.dims.K
    gH = (W.T @ R + p.lambda_h * H + p.beta * (H - H0)) / N
    return gW, gH


def matches_collapsed_minimizer(W, H, p: ModelParams, tol=1e-8) -> bool:
    """True when ``(W, H)`` is a collapsed global minimizer for ``p``."""
    if p.lambda_h <= 0 or p.c >= 1:
        return False
    flag, _ = is_collapsed(H, p.dims, tol=tol)
    if not flag:
        return False
    Hbar = class_means(H, p.dims)
    rho = p.rho
    K = p.dims.K
    if np.linalg.norm(Hbar.T @ Hbar - rho * np.eye(K)) > tol * (1 + rho):
        return False
    return bool(np.linalg.norm(W - optimal_weights(H, p)) <= tol * (1 + np.linalg.norm(W)))


@dataclass(frozen=True, eq=False)
class ResponseOperator:
    """Linear map ``vec(dH0) -> vec(dH)``; ``F`` is ``None`` in operator form."""

    kind: str  # "exact_schur" or "neumann"
    base_point: tuple  # (W, H, H0 or None)
    collapsed_base: bool
    size: int
    F: np.ndarray | None = field(default=None, repr=False)
    _apply: object = field(default=None, repr=False)

    @property
    def explicit(self) -> bool:
        return self.F is not None

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if self.F is not None:
            return self.F @ v
        return self._apply(v)

    def matrix(self) -> np.ndarray:
        if self.F is not None:
            return self.F
        return np.column_stack([self._apply(e) for e in np.eye(self.size)])

    def as_linear_operator(self):
        return spla.LinearOperator((self.size, self.size), matvec=self.apply, dtype=float)


def _schur_explicit(blocks: HessianBlocks):
    WW = scipy.linalg.cho_factor(blocks.WW)
    S = blocks.HH - blocks.WH @ scipy.linalg.cho_solve(WW, blocks.WH.T)
    S = 0.5 * (S + S.T)
    try:
        cf = scipy.linalg.cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Schur complement is not positive definite at this base point") from exc
    scale = blocks.p.beta / blocks.p.dims.N
    F = scale * scipy.linalg.cho_solve(cf, np.eye(S.shape[0]))
    return 0.5 * (F + F.T)


def exact_response(blocks: HessianBlocks, p: ModelParams, H0=None, explicit=None) -> ResponseOperator:
    """``F = (beta/Kn) (HH - WH WW^{-1} WH^T)^{-1}``.

    Formed densely when ``dnK <= EXPLICIT_LIMIT`` (or ``explicit=True``);
    otherwise applied with conjugate gradients on the Schur complement.
    """
    if blocks.p != p:
        raise BaseMismatch("Hessian blocks were built for different parameters")
    dims = p.dims
    size = dims.d * dims.N
    if explicit is None:
        explicit = size <= EXPLICIT_LIMIT
    base = (blocks.W, blocks.H, None if H0 is None else check_features(H0, dims))
    tag = matches_collapsed_minimizer(blocks.W, blocks.H, p)
    if explicit:
        return ResponseOperator("exact_schur", base, tag, size, F=_schur_explicit(blocks))

    shape = dims.feature_shape
    scale = p.beta / dims.N

    def schur(v):
        V = _unvec(v, shape)
        dW = blocks.ww_solve(blocks.wh_adjoint(V))
        return _vec(blocks.hh_apply(V) - blocks.wh_apply(dW))

    S = spla.LinearOperator((size, size), matvec=schur, dtype=float)

    def apply(v):
        x, info = spla.cg(S, scale * v, rtol=1e-13, atol=0.0, maxiter=10 * size)
        if info != 0:
            raise np.linalg.LinAlgError(f"CG on the Schur complement did not converge (info={info})")
        return x

    return ResponseOperator("exact_schur", base, tag, size, _apply=apply)


def neumann_response(W, H, p: ModelParams) -> ResponseOperator:
    """First-order large-``beta`` response ``I - (lambda_h/beta) I - (1/beta) I kron W^T W + (1/beta) Z``."""
    if p.beta < 50 * max(1.0, p.lambda_h):
        warnings.warn(f"beta={p.beta} is not large against max(1, lambda_h); the first-order response is unreliable",
                      RuntimeWarning, stacklevel=2)
    blocks = hessian_blocks(W, H, p)
    dims = p.dims
    N = dims.N
    size = dims.d * N
    G = blocks.H @ blocks.H.T
    G[np.diag_indices_from(G)] += dims.n * p.lambda_w
    inner = np.kron(G, np.eye(dims.K))
    X = blocks.E.T + np.kron(blocks.H, blocks.W)  # Kd x dnK
    Z = X.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(inner), X)
    F = (1.0 - p.lambda_h / p.beta) * np.eye(size) - np.kron(np.eye(N), blocks.W.T @ blocks.W) / p.beta + Z / p.beta
    tag = matches_collapsed_minimizer(blocks.W, blocks.H, p)
    return ResponseOperator("neumann", (blocks.W, blocks.H, None), tag, size, F=F)


def delta_w_response(blocks: HessianBlocks, F: ResponseOperator, p: ModelParams):
    """Map ``vec(dH0) -> vec(dW) = -WW^{-1} WH^T F vec(dH0)``.

    Returns a dense ``Kd x dnK`` matrix for an explicit ``F`` and a
    ``LinearOperator`` otherwise.
    """
    if F.kind != "exact_schur":
        raise BaseMismatch("delta_w_response needs the exact Schur response")
    W0, H0_, _ = F.base_point
    if blocks.p != p or not (np.array_equal(W0, blocks.W) and np.array_equal(H0_, blocks.H)):
        raise BaseMismatch("response operator and Hessian blocks come from different base points")
    if F.explicit:
        return -scipy.linalg.cho_solve(scipy.linalg.cho_factor(blocks.WW), blocks.WH.T @ F.F)
    shape = p.dims.feature_shape

    def apply(v):
        V = _unvec(F.apply(v), shape)
        return _vec(-blocks.ww_solve(blocks.wh_adjoint(V)))

    return spla.LinearOperator((p.dims.K * p.dims.d, F.size), matvec=apply, dtype=float)


def _check_class_index(k, K):
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= K):
        raise PreconditionError(f"class index must lie in 1..{K}, got {k!r}")


def extract_block(F: ResponseOperator, k: int, kt: int, K: int) -> np.ndarray:
    """Block ``(k, kt)`` of ``F`` (1-based class indices), size ``dn x dn``."""
    _check_class_index(k, K)
    _check_class_index(kt, K)
    m = F.size // K
    if F.explicit:
        return F.F[(k - 1) * m : k * m, (kt - 1) * m : kt * m].copy()
    cols = []
    for j in range(m):
        e = np.zeros(F.size)
        e[(kt - 1) * m + j] = 1.0
        cols.append(F.apply(e)[(k - 1) * m : k * m])
    return np.column_stack(cols)


def commutation_matrix(d: int, K: int) -> np.ndarray:
    """Permutation ``P`` (``Kd x dK``) with ``P^T (X1 kron X2) P = X2 kron X1`` for ``X1`` d x d, ``X2`` K x K."""
    if d < 1 or K < 1:
        raise PreconditionError("commutation matrix needs positive sizes")
    P = np.zeros((K * d, d * K))
    for i in range(d):
        for k in range(K):
            P[i * K + k, k * d + i] = 1.0
    return P


@dataclass(frozen=True)
class BlockSpectrum:
    k: int
    kt: int
    singular_values: np.ndarray
    analytic: dict | None = None


def analytic_eigen_families(p: ModelParams, k: int, kt: int) -> dict:
    """Eigenvalue families of the block at a collapsed minimizer.

    Diagonal blocks: ``lambda_i`` (each with multiplicity ``n-1``) and
    ``lambda_i + mu_i / beta`` on the class-constant directions.
    Off-diagonal blocks: a single nonzero singular value.
    """
    dims = p.dims
    dims.require_rich(strict=True)
    if not p.lambda_h > 0 or not p.c < 1:
        raise PreconditionError("analytic block spectrum needs lambda_h > 0 and lambda_h * lambda_w < 1")
    _check_class_index(k, dims.K)
    _check_class_index(kt, dims.K)
    if p.beta < 50 * max(1.0, p.lambda_h):
        warnings.warn("beta is not large against max(1, lambda_h)", RuntimeWarning, stacklevel=2)
    K, d, beta, c = dims.K, dims.d, p.beta, p.c
    q = np.sqrt(p.lambda_h / p.lambda_w)
    lam = np.array([1.0 - q / beta] * K + [1.0 - p.lambda_h / beta] * (d - K))
    mu = np.array([(c * c + (1 - c) ** 2) * q] * K + [p.lambda_h] * (d - K))
    mu[k - 1] = (2 * c - 1) ** 2 * q
    return {
        "lambda": lam,
        "mu": mu,
        "offdiag_sigma": 2.0 * p.lambda_h * (1.0 - c) / beta,
    }


def analytic_block_spectrum(p: ModelParams, k: int, kt: int) -> BlockSpectrum:
    """Sorted (descending) singular values of block ``(k, kt)`` of the first-order response at a collapsed minimizer."""
    fam = analytic_eigen_families(p, k, kt)
    n, d = p.dims.n, p.dims.d
    if k == kt:
        lam, mu = fam["lambda"], fam["mu"]
        values = np.concatenate([np.repeat(lam, n - 1), lam + mu / p.beta])
    else:
        values = np.zeros(d * n)
        values[0] = fam["offdiag_sigma"]
    values = np.sort(values)[::-1]
    return BlockSpectrum(k, kt, values, analytic=fam)


def block_spectrum(F: ResponseOperator, p: ModelParams, k: int, kt: int, with_analytic=True) -> BlockSpectrum:
    """Numeric singular values of block ``(k, kt)``; analytic values attached only at collapsed bases."""
    sv = np.linalg.svd(extract_block(F, k, kt, p.dims.K), compute_uv=False)
    analytic = None
    if with_analytic and F.collapsed_base and F.kind == "neumann" and p.dims.d > p.dims.K:
        analytic = {"sigma": analytic_block_spectrum(p, k, kt).singular_values}
    return BlockSpectrum(k, kt, sv, analytic=analytic)


def compare_block_spectrum(F: ResponseOperator, p: ModelParams, k: int, kt: int) -> float:
    """Max abs difference between numeric and analytic block singular values.

    Refuses operators whose base point is not a collapsed minimizer of ``p``.
    """
    if not F.collapsed_base:
        raise BaseMismatch("analytic spectra only apply at a collapsed minimizer")
    num = block_spectrum(F, p, k, kt, with_analytic=False).singular_values
    ana = analytic_block_spectrum(p, k, kt).singular_values
    return float(np.max(np.abs(num - ana)))


def unit_eigenvalue_multiplicity(block, tol=1e-10) -> int:
    """Number of eigenvalues of a symmetric block within ``tol`` of 1."""
    ev = np.linalg.eigvalsh(0.5 * (block + block.T))
    return int(np.sum(np.abs(ev - 1.0) <= tol))


def spectrum_rows(spectra, p: ModelParams) -> list[list]:
    """CSV rows ``k,ktilde,index,sigma_numeric,sigma_analytic,abs_err`` (analytic cells empty when unknown)."""
    rows = []
    for s in spectra:
        ana = None if s.analytic is None else s.analytic.get("sigma")
        for idx, val in enumerate(s.singular_values):
            if ana is None:
                rows.append([s.k, s.kt, idx, float(val), "", ""])
            else:
                a = float(ana[idx])
                rows.append([s.k, s.kt, idx, float(val), a, abs(float(val) - a)])
    return rows


def lambda_h_sweep(dims, beta, lambda_w, lambda_hs, seed=0, k=1):
    """Diagonal-block spectrum of the first-order response at the collapsed minimizer for each ``lambda_h``.

    Returns a list of ``(lambda_h, numeric, analytic)`` with descending singular values.
    """
    from .ufm import collapsed_minimizer

    out = []
    for lh in lambda_hs:
        p = ModelParams(dims, lambda_w, lh, beta)
        m = collapsed_minimizer(p, seed=seed)
        F = neumann_response(m.W_star, m.H_star, p)
        num = np.linalg.svd(extract_block(F, k, k, dims.K), compute_uv=False)
        out.append((lh, num, analytic_block_spectrum(p, k, k).singular_values))
    return out
