"""Pure-numpy central-path kernels.

Same call signatures as the compiled ``_kernels`` extension; used when the
extension is unavailable or ``COLLAPSE_LAB_PURE_PYTHON`` is set.
"""
import numpy as np
import scipy.linalg


def _pieces(H, K, n, lam_w):
    d, N = H.shape
    Hbar = H.reshape(d, K, n).mean(axis=2)
    P = H - np.repeat(Hbar, n, axis=1)
    shift = lam_w / K
    A = H @ H.T / N
    B = P @ P.T / N
    A[np.diag_indices(d)] += shift
    B[np.diag_indices(d)] += shift
    return P, A, B


def _loss_from(A, B, cf, K, lam_w, lam_h):
    d = A.shape[0]
    tr_t = np.trace(A) - d * lam_w / K
    tr_ab = np.trace(scipy.linalg.cho_solve(cf, B))
    return 0.5 * tr_ab / K + 0.5 * lam_h * tr_t - 0.5 * (d - K) / K


def central_loss(H, K, n, lam_w, lam_h):
    P, A, B = _pieces(H, K, n, lam_w)
    cf = scipy.linalg.cho_factor(A)
    return float(_loss_from(A, B, cf, K, lam_w, lam_h))


def central_grad(H, K, n, lam_w, lam_h):
    P, A, B = _pieces(H, K, n, lam_w)
    cf = scipy.linalg.cho_factor(A)
    G1 = scipy.linalg.cho_solve(cf, P)
    G2 = scipy.linalg.cho_solve(cf, B @ scipy.linalg.cho_solve(cf, H))
    return (G1 - G2 + lam_h * K * H) / (K * K * n)


def loss_and_grad(H, K, n, lam_w, lam_h):
    P, A, B = _pieces(H, K, n, lam_w)
    cf = scipy.linalg.cho_factor(A)
    G1 = scipy.linalg.cho_solve(cf, P)
    G2 = scipy.linalg.cho_solve(cf, B @ scipy.linalg.cho_solve(cf, H))
    grad = (G1 - G2 + lam_h * K * H) / (K * K * n)
    return float(_loss_from(A, B, cf, K, lam_w, lam_h)), grad


def rk4_step(H, K, n, lam_w, lam_h, dt, nsub=1):
    """Advance ``dH/dt = -K n grad L(H)`` by ``dt`` using ``nsub`` classical RK4 substeps."""
    Y = np.array(H, dtype=float, copy=True)
    h = dt / nsub
    scale = -K * n
    for _ in range(nsub):
        k1 = scale * central_grad(Y, K, n, lam_w, lam_h)
        k2 = scale * central_grad(Y + 0.5 * h * k1, K, n, lam_w, lam_h)
        k3 = scale * central_grad(Y + 0.5 * h * k2, K, n, lam_w, lam_h)
        k4 = scale * central_grad(Y + h * k3, K, n, lam_w, lam_h)
        Y = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Y
