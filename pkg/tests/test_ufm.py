import numpy as np
import pytest

from collapse_lab import DegenerateModel, PreconditionError, ShapeError
from collapse_lab.ufm import (
    Dims,
    ModelParams,
    build_label_matrix,
    class_means,
    class_statistics,
    collapsed_minimizer,
    is_collapsed,
    minimize_numeric,
    minimum_value,
    objective_gradients,
    objective_plain,
    objective_prox,
    optimal_weights,
)

from conftest import fd_gradient


def params(K=3, n=2, d=4, lw=2.0, lh=0.125, beta=1e3):
    return ModelParams(Dims(K, n, d), lw, lh, beta)


def test_label_matrix_examples():
    assert np.array_equal(build_label_matrix(Dims(2, 2, 2)), [[1, 1, 0, 0], [0, 0, 1, 1]])
    assert np.array_equal(build_label_matrix(Dims(1, 3, 1)), [[1, 1, 1]])
    assert np.array_equal(build_label_matrix(Dims(3, 1, 3)), np.eye(3))
    Y = build_label_matrix(Dims(4, 5, 6))
    assert np.sum(Y**2) == 20
    assert np.all(Y.sum(axis=0) == 1)


def test_dims_and_params_validation():
    with pytest.raises(PreconditionError):
        Dims(3, 2, 2).require_rich()
    with pytest.raises(PreconditionError):
        Dims(2, 2, 2).require_rich(strict=True)
    with pytest.raises(PreconditionError):
        collapsed_minimizer(ModelParams(Dims(3, 2, 2), 2.0, 0.125))
    with pytest.raises(PreconditionError):
        Dims(2, 0, 3)
    with pytest.raises(PreconditionError):
        ModelParams(Dims(2, 2, 3), 0.0, 0.1)
    with pytest.raises(PreconditionError):
        ModelParams(Dims(2, 2, 3), 1.0, 0.1, beta=0.0)
    p = params(lw=2.0, lh=0.125)
    assert p.c == pytest.approx(0.5, abs=1e-15)
    assert p.with_(lambda_h=0.5).c == pytest.approx(1.0, abs=1e-15)


def test_objective_plain_at_zero_is_half():
    tol = 1e-15
    p = params()
    assert abs(objective_plain(np.zeros((3, 4)), np.zeros((4, 6)), p) - 0.5) < tol


def test_objective_plain_rejects_bad_shapes():
    p = params()
    with pytest.raises(ShapeError):
        objective_plain(np.zeros((4, 3)), np.zeros((4, 6)), p)
    with pytest.raises(ShapeError):
        objective_plain(np.zeros((3, 4)), np.zeros((4, 5)), p)


def test_collapsed_minimum_matches_numeric_minimization():
    tol = 1e-8
    p = params(K=3, n=2, d=4, lw=2.0, lh=0.125)
    m = collapsed_minimizer(p, seed=0)
    target = objective_plain(m.W_star, m.H_star, p)
    best = min(minimize_numeric(p, seed=s)[2] for s in range(10))
    assert abs(best - target) < tol
    assert objective_plain(2 * m.W_star, m.H_star, p) > target


def test_objective_prox_reductions(rng):
    tol = 1e-14
    p = params()
    W = rng.standard_normal((3, 4))
    H = rng.standard_normal((4, 6))
    assert abs(objective_prox(W, H, H, p) - objective_plain(W, H, p)) < tol
    q = params(lh=0.0, beta=1.0)
    assert abs(objective_prox(W, H, np.zeros_like(H), q) - objective_plain(W, H, q.with_(lambda_h=1.0))) < tol


def test_objective_prox_scalar_loop(rng):
    tol = 1e-13
    K, n, d = 2, 2, 3
    p = ModelParams(Dims(K, n, d), 0.7, 0.3, 2.5)
    W = rng.standard_normal((K, d))
    H = rng.standard_normal((d, K * n))
    H0 = rng.standard_normal((d, K * n))
    fit = 0.0
    for k in range(K):
        for j in range(K * n):
            y = 1.0 if j // n == k else 0.0
            s = sum(W[k, a] * H[a, j] for a in range(d))
            fit += (s - y) ** 2
    wn = sum(W[k, a] ** 2 for k in range(K) for a in range(d))
    hn = sum(H[a, j] ** 2 for a in range(d) for j in range(K * n))
    pn = sum((H[a, j] - H0[a, j]) ** 2 for a in range(d) for j in range(K * n))
    N = K * n
    expected = fit / (2 * N) + 0.7 * wn / (2 * K) + 0.3 * hn / (2 * N) + 2.5 * pn / (2 * N)
    assert abs(objective_prox(W, H, H0, p) - expected) < tol


def test_objective_gradients_match_finite_differences(rng):
    tol = 1e-7
    p = params(K=2, n=2, d=3, lw=0.9, lh=0.2, beta=3.0)
    W = rng.standard_normal((2, 3))
    H = rng.standard_normal((3, 4))
    H0 = rng.standard_normal((3, 4))
    gW, gH = objective_gradients(W, H, p, H0=H0)
    fW = fd_gradient(lambda X: objective_prox(X, H, H0, p), W, 1e-6)
    fH = fd_gradient(lambda X: objective_prox(W, X, H0, p), H, 1e-6)
    assert np.abs(gW - fW).max() < tol
    assert np.abs(gH - fH).max() < tol


def test_optimal_weights_zero_features():
    p = params()
    assert np.array_equal(optimal_weights(np.zeros((4, 6)), p), np.zeros((3, 4)))


def test_optimal_weights_at_collapse_align_with_means():
    tol = 1e-12
    p = params(lw=2.0, lh=0.125)
    m = collapsed_minimizer(p)
    W = optimal_weights(m.H_star, p)
    expected = np.sqrt(p.lambda_h / p.lambda_w) * class_means(m.H_star, p.dims).T
    assert np.abs(W - expected).max() < tol
    assert np.abs(W - m.W_star).max() < tol


def test_optimal_weights_zero_the_weight_gradient(rng):
    p = params(K=3, n=2, d=4, lw=0.8, lh=0.3)
    H = rng.standard_normal((4, 6))
    W = optimal_weights(H, p)
    tol = 1e-10 * (1 + np.linalg.norm(H))
    assert np.linalg.norm(objective_gradients(W, H, p)[0]) < tol
    H0 = rng.standard_normal((4, 6))
    assert np.linalg.norm(objective_gradients(W, H, p, H0=H0)[0]) < tol
    fd = fd_gradient(lambda X: objective_plain(X, H, p), W, 1e-5)
    assert np.linalg.norm(fd) < 1e-9


def test_optimal_weights_beat_random_weights(rng):
    p = params(K=3, n=3, d=5, lw=0.5, lh=0.1)
    for _ in range(5):
        H = rng.standard_normal((5, 9))
        best = objective_plain(optimal_weights(H, p), H, p)
        for _ in range(100):
            W = rng.standard_normal((3, 5)) * rng.choice([0.01, 0.3, 1.0])
            assert best <= objective_plain(W, H, p) + 1e-14


def test_collapsed_minimizer_rho_and_structure():
    tol = 1e-12
    p = params(K=3, n=2, d=4, lw=2.0, lh=0.125)
    m = collapsed_minimizer(p, seed=3)
    assert abs(m.rho - 2.0) < tol
    assert np.abs(m.R.T @ m.R - np.eye(3)).max() < tol
    Hbar = class_means(m.H_star, p.dims)
    assert np.abs(Hbar.T @ Hbar - m.rho * np.eye(3)).max() < 1e-10
    assert np.array_equal(m.H_star, np.repeat(Hbar, 2, axis=1))
    assert np.allclose(np.sum(Hbar**2, axis=0), m.rho, rtol=0, atol=1e-10)
    # sign convention: largest-magnitude entry of each column of R is positive
    cols = np.arange(3)
    assert np.all(m.R[np.argmax(np.abs(m.R), axis=0), cols] > 0)


def test_collapsed_minimizer_is_deterministic():
    p = params()
    a = collapsed_minimizer(p, seed=7)
    b = collapsed_minimizer(p, seed=7)
    assert np.array_equal(a.R, b.R)
    assert not np.array_equal(a.R, collapsed_minimizer(p, seed=8).R)


def test_collapsed_minimizer_degenerate_regimes():
    with pytest.raises(DegenerateModel):
        collapsed_minimizer(params(lw=2.0, lh=1.0))
    with pytest.raises(DegenerateModel):
        collapsed_minimizer(params(lw=2.0, lh=0.5))  # c = 1 exactly
    with pytest.raises(PreconditionError):
        collapsed_minimizer(params(lh=0.0))
    assert minimum_value(params(lw=2.0, lh=1.0)) == 0.5


def test_degenerate_model_minimizes_to_zero():
    tol = 1e-6
    p = params(lw=2.0, lh=1.0)
    W, H, value = minimize_numeric(p, seed=1)
    assert abs(value - 0.5) < 1e-10
    assert np.linalg.norm(W) < tol and np.linalg.norm(H) < tol


@pytest.mark.parametrize("dims", [Dims(2, 1, 2), Dims(3, 4, 5), Dims(5, 2, 9)])
def test_rho_and_minimum_do_not_depend_on_dims(dims):
    tol = 1e-12
    p = ModelParams(dims, 2.0, 0.125)
    ref = ModelParams(Dims(4, 10, 10), 2.0, 0.125)
    assert abs(p.rho - ref.rho) < tol
    assert abs(minimum_value(p) - minimum_value(ref)) < tol


def test_prox_objective_with_collapsed_anchor_returns_to_it(rng):
    tol = 1e-6
    p = params(K=2, n=2, d=3, lw=2.0, lh=0.125, beta=1.0)
    m = collapsed_minimizer(p)
    for s in range(10):
        W, H, _ = minimize_numeric(p, seed=s, H0=m.H_star, scale=0.3, start=(m.W_star, m.H_star))
        assert np.abs(H - m.H_star).max() < tol
        assert np.abs(W - m.W_star).max() < tol


def test_is_collapsed_examples(rng):
    tol = 1e-8
    p = params()
    m = collapsed_minimizer(p)
    ok, diag = is_collapsed(m.H_star, p.dims, tol)
    assert ok and abs(diag["rho_hat"] - m.rho) < 1e-12
    noise = rng.standard_normal(m.H_star.shape)
    noisy = m.H_star + 10 * tol * noise / np.linalg.norm(noise) * np.sqrt(noise.size)
    assert not is_collapsed(noisy, p.dims, tol)[0]
    assert not is_collapsed(np.zeros((4, 6)), p.dims, tol)[0]
    with pytest.raises(PreconditionError):
        is_collapsed(m.H_star, p.dims, 0.0)


def test_class_statistics_hand_example():
    tol = 1e-15
    stats = class_statistics(np.array([[1.0, 3.0, -1.0, -3.0]]), Dims(2, 2, 1))
    assert abs(stats.sigma_w[0, 0] - 1.0) < tol
    assert abs(stats.sigma_b[0, 0] - 4.0) < tol
    assert abs(stats.sigma_t_tilde[0, 0] - 5.0) < tol


def test_class_statistics_decomposition_and_invariance(rng):
    tol = 1e-12
    dims = Dims(3, 4, 5)
    H = rng.standard_normal(dims.feature_shape)
    s = class_statistics(H, dims)
    assert np.abs(s.sigma_t_tilde - s.sigma_w - s.sigma_b_tilde).max() < tol
    shifted = class_statistics(H + rng.standard_normal((5, 1)), dims)
    assert np.abs(shifted.sigma_w - s.sigma_w).max() < tol
    assert np.abs(shifted.sigma_b - s.sigma_b).max() < tol
    flat = class_statistics(np.repeat(rng.standard_normal((5, 3)), 4, axis=1), dims)
    assert np.abs(flat.sigma_w).max() == 0.0
