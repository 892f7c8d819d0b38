# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled central-path kernels.

Loss, gradient and RK4 flow step for the central-path loss.  Works on the
transposed feature matrix so every sample vector is contiguous; a C-ordered
``N x d`` array is the column-major ``d x N`` feature matrix, which is what
the BLAS calls below see.
"""
import numpy as np
from scipy.linalg.cython_blas cimport dgemm
from scipy.linalg.cython_lapack cimport dpotrf, dpotri


cdef class _Workspace:
    cdef public object A_arr, B_arr, C_arr, D_arr, T_arr, means_arr, P_arr
    cdef double[:, ::1] A, B, C, D, T, means, P

    def __init__(self, Py_ssize_t d, Py_ssize_t K, Py_ssize_t N):
        self.A_arr = np.empty((d, d))
        self.B_arr = np.empty((d, d))
        self.C_arr = np.empty((d, d))
        self.D_arr = np.empty((d, d))
        self.T_arr = np.empty((d, d))
        self.means_arr = np.empty((K, d))
        self.P_arr = np.empty((N, d))
        self.A = self.A_arr
        self.B = self.B_arr
        self.C = self.C_arr
        self.D = self.D_arr
        self.T = self.T_arr
        self.means = self.means_arr
        self.P = self.P_arr


cdef int _evaluate(double[:, ::1] HT, Py_ssize_t K, Py_ssize_t n, double lam_w, double lam_h,
                   _Workspace ws, double[:, ::1] GT, double* loss, bint want_loss,
                   bint want_grad) noexcept nogil:
    """Central loss and/or gradient; ``HT`` and ``GT`` are ``N x d``."""
    cdef Py_ssize_t N = HT.shape[0]
    cdef Py_ssize_t d = HT.shape[1]
    cdef Py_ssize_t j, a, b, k
    cdef int di = <int>d, Ni = <int>N, info = 0
    cdef double s, shift = lam_w / K, inv_n = 1.0 / n, inv_N = 1.0 / N
    cdef double tr_t = 0.0, tr_ab = 0.0, scale = 1.0 / (K * K * n)
    cdef double zero = 0.0, one = 1.0, neg = -scale
    cdef double[:, ::1] A = ws.A, B = ws.B, C = ws.C, D = ws.D, T = ws.T, means = ws.means, P = ws.P

    for k in range(K):
        for a in range(d):
            s = 0.0
            for j in range(k * n, (k + 1) * n):
                s += HT[j, a]
            means[k, a] = s * inv_n
    for j in range(N):
        k = j // n
        for a in range(d):
            P[j, a] = HT[j, a] - means[k, a]

    # A = H H^T / N + shift I, B = P P^T / N + shift I
    dgemm(b"N", b"T", &di, &di, &Ni, &inv_N, &HT[0, 0], &di, &HT[0, 0], &di, &zero, &A[0, 0], &di)
    dgemm(b"N", b"T", &di, &di, &Ni, &inv_N, &P[0, 0], &di, &P[0, 0], &di, &zero, &B[0, 0], &di)
    for a in range(d):
        tr_t += A[a, a]
        A[a, a] += shift
        B[a, a] += shift

    # C = A^{-1}; LAPACK fills one triangle, mirror it
    C[:, :] = A
    dpotrf(b"L", &di, &C[0, 0], &di, &info)
    if info != 0:
        return -1
    dpotri(b"L", &di, &C[0, 0], &di, &info)
    if info != 0:
        return -1
    for a in range(d):
        for b in range(a + 1, d):
            C[b, a] = C[a, b]

    if want_loss:
        for a in range(d):
            for b in range(d):
                tr_ab += C[a, b] * B[a, b]
        loss[0] = 0.5 * tr_ab / K + 0.5 * lam_h * tr_t - 0.5 * (d - K) / K

    if want_grad:
        # D = A^{-1} B A^{-1};  G = scale (A^{-1} P - D H + lam_h K H)
        dgemm(b"N", b"N", &di, &di, &di, &one, &B[0, 0], &di, &C[0, 0], &di, &zero, &T[0, 0], &di)
        dgemm(b"N", b"N", &di, &di, &di, &one, &C[0, 0], &di, &T[0, 0], &di, &zero, &D[0, 0], &di)
        dgemm(b"N", b"N", &di, &Ni, &di, &scale, &C[0, 0], &di, &P[0, 0], &di, &zero, &GT[0, 0], &di)
        dgemm(b"N", b"N", &di, &Ni, &di, &neg, &D[0, 0], &di, &HT[0, 0], &di, &one, &GT[0, 0], &di)
        s = scale * lam_h * K
        for j in range(N):
            for a in range(d):
                GT[j, a] += s * HT[j, a]
    return 0


def _transposed(H):
    return np.ascontiguousarray(np.asarray(H, dtype=np.float64).T)


def central_loss(H, Py_ssize_t K, Py_ssize_t n, double lam_w, double lam_h):
    cdef double[:, ::1] HT = _transposed(H)
    cdef _Workspace ws = _Workspace(HT.shape[1], K, HT.shape[0])
    cdef double loss = 0.0
    cdef int status
    with nogil:
        status = _evaluate(HT, K, n, lam_w, lam_h, ws, HT, &loss, True, False)
    if status != 0:
        raise np.linalg.LinAlgError("regularized total covariance is not positive definite")
    return loss


def central_grad(H, Py_ssize_t K, Py_ssize_t n, double lam_w, double lam_h):
    cdef double[:, ::1] HT = _transposed(H)
    cdef _Workspace ws = _Workspace(HT.shape[1], K, HT.shape[0])
    out = np.empty((HT.shape[0], HT.shape[1]))
    cdef double[:, ::1] GT = out
    cdef double loss = 0.0
    cdef int status
    with nogil:
        status = _evaluate(HT, K, n, lam_w, lam_h, ws, GT, &loss, False, True)
    if status != 0:
        raise np.linalg.LinAlgError("regularized total covariance is not positive definite")
    return out.T.copy()


def loss_and_grad(H, Py_ssize_t K, Py_ssize_t n, double lam_w, double lam_h):
    cdef double[:, ::1] HT = _transposed(H)
    cdef _Workspace ws = _Workspace(HT.shape[1], K, HT.shape[0])
    out = np.empty((HT.shape[0], HT.shape[1]))
    cdef double[:, ::1] GT = out
    cdef double loss = 0.0
    cdef int status
    with nogil:
        status = _evaluate(HT, K, n, lam_w, lam_h, ws, GT, &loss, True, True)
    if status != 0:
        raise np.linalg.LinAlgError("regularized total covariance is not positive definite")
    return loss, out.T.copy()


def rk4_step(H, Py_ssize_t K, Py_ssize_t n, double lam_w, double lam_h, double dt, Py_ssize_t nsub=1):
    """Advance ``dH/dt = -K n grad L(H)`` by ``dt`` using ``nsub`` classical RK4 substeps."""
    Y_arr = _transposed(H)
    cdef double[:, ::1] Y = Y_arr
    cdef Py_ssize_t N = Y.shape[0], d = Y.shape[1]
    cdef _Workspace ws = _Workspace(d, K, N)
    stage_arr = np.empty((N, d))
    k_arr = np.empty((4, N, d))
    cdef double[:, ::1] S = stage_arr
    cdef double[:, :, ::1] kk = k_arr
    cdef double h = dt / nsub, f = -(<double>K) * n, loss = 0.0
    cdef Py_ssize_t step, stage, j, a
    cdef int status = 0
    cdef double c
    with nogil:
        for step in range(nsub):
            for stage in range(4):
                if stage == 0:
                    status = _evaluate(Y, K, n, lam_w, lam_h, ws, kk[0], &loss, False, True)
                else:
                    c = h if stage == 3 else 0.5 * h
                    for j in range(N):
                        for a in range(d):
                            S[j, a] = Y[j, a] + c * f * kk[stage - 1, j, a]
                    status = _evaluate(S, K, n, lam_w, lam_h, ws, kk[stage], &loss, False, True)
                if status != 0:
                    break
            if status != 0:
                break
            for j in range(N):
                for a in range(d):
                    Y[j, a] += (h / 6.0) * f * (kk[0, j, a] + 2.0 * kk[1, j, a]
                                                + 2.0 * kk[2, j, a] + kk[3, j, a])
    if status != 0:
        raise np.linalg.LinAlgError("regularized total covariance is not positive definite")
    return Y_arr.T.copy()
