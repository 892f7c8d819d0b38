"""Acceptance criteria, one test each, at their stated tolerances.

Every test prints a single ``PASS``/``FAIL`` line (visible without ``-s``) and
then asserts the same condition.
"""
import time
import warnings

import numpy as np
import pytest

from collapse_lab.central_path import FlowConfig, central_gradient, central_loss, flow_integrate, gradient_bound_constant
from collapse_lab.metrics import nc1_tilde
from collapse_lab.perturbation import (
    analytic_eigen_families,
    exact_response,
    extract_block,
    hessian_blocks,
    lambda_h_sweep,
    neumann_response,
    unit_eigenvalue_multiplicity,
)
from collapse_lab.prox import (
    SolveConfig,
    displacement_bound,
    layerwise_stack,
    lipschitz_map_check,
    solve_prox,
)
from collapse_lab.ufm import (
    Dims,
    ModelParams,
    class_means,
    class_statistics,
    collapsed_minimizer,
    minimize_numeric,
    minimum_value,
)

from conftest import fd_gradient


@pytest.fixture
def report(capsys):
    start = time.perf_counter()

    def emit(number, name, ok, detail, budget):
        elapsed = time.perf_counter() - start
        ok = bool(ok) and elapsed < budget
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail} ({elapsed:.1f}s / {budget}s)")
        return ok

    return emit


def test_criterion_01_global_minimizer(report):
    tol_obj, tol_gram = 1e-6, 1e-4
    p = ModelParams(Dims(4, 10, 10), 2.0, 0.125)
    target = minimum_value(p)
    gaps, grams = [], []
    for seed in range(10):
        _, H, value = minimize_numeric(p, seed=seed)
        gaps.append(abs(value - target) / abs(target))
        Hbar = class_means(H, p.dims)
        grams.append(np.abs(Hbar.T @ Hbar - 2.0 * np.eye(4)).max())
    ok = max(gaps) <= tol_obj and max(grams) <= tol_gram and p.rho == 2.0
    assert report(1, "numeric minimum equals collapsed minimum", ok,
                  f"max rel gap {max(gaps):.2e}, max Gram err {max(grams):.2e}", 30)


def test_criterion_02_gradient(report, rng):
    tol = 1e-6
    dims_list = [Dims(2, 2, 3), Dims(3, 2, 4), Dims(4, 3, 6), Dims(5, 6, 12)]
    worst = 0.0
    for i in range(200):
        dims = dims_list[i % len(dims_list)]
        p = ModelParams(dims, rng.uniform(0.2, 3.0), rng.uniform(0.0, 1.0))
        H = rng.choice([0.1, 1.0, 3.0]) * rng.standard_normal(dims.feature_shape)
        fd = fd_gradient(lambda X: central_loss(X, p), H, 1e-5 * (1 + np.linalg.norm(H)))
        worst = max(worst, np.abs(central_gradient(H, p) - fd).max() / np.abs(fd).max())
    assert report(2, "central gradient vs finite differences", worst <= tol, f"max rel err {worst:.2e}", 20)


def test_criterion_03_flow_monotonicity(report):
    mono, rate_rel = 1e-9, 0.1
    lh = 0.25
    p = ModelParams(Dims(3, 4, 6), 2.0, lh)
    cfg = FlowConfig(t_end=5.0, dt=1e-3, record_every=100)
    fails, rates = [], []
    for seed in range(20):
        H0 = np.random.default_rng(seed).standard_normal(p.dims.feature_shape)
        assert np.trace(class_statistics(H0, p.dims).sigma_w) > 0
        tr = flow_integrate(H0, p, cfg)
        tw, tb = tr.weighted_trsw(), tr.weighted_trsb()
        ok = (np.all(np.diff(tr.column("nc1_tilde")) < 0)
              and np.all(np.diff(tw) <= mono * (1 + np.abs(tw[:-1])))
              and np.all(np.diff(tb) > 0))
        rates.append(tr.decay_rate())
        if not ok:
            fails.append(seed)
    rate_ok = max(rates) <= -2 * lh * (1 - rate_rel)
    assert report(3, "flow monotonicity and trace decay", not fails and rate_ok,
                  f"failing seeds {fails}, slowest decay rate {max(rates):.4f} (limit {-2 * lh * (1 - rate_rel):.3f})",
                  60)


def test_criteria_04_05_displacement_bound_and_nc1(report):
    p0 = ModelParams(Dims(3, 4, 6), 2.0, 0.125)
    rng = np.random.default_rng(4)
    starts = [rng.standard_normal(p0.dims.feature_shape) for _ in range(20)]
    bound_fail, worst = 0, 0.0
    nc1_fail = 0
    for beta in (1e2, 1e3, 1e4):
        p = p0.with_(beta=beta)
        assert beta > p.dims.N * gradient_bound_constant(p)
        for i, H0 in enumerate(starts):
            if i >= 10 and beta != 1e3:
                continue
            H = solve_prox(H0, p).H_star
            if i < 10:
                ratio = np.linalg.norm(H - H0) / displacement_bound(H0, p)
                worst = max(worst, ratio)
                bound_fail += ratio > 1
            if beta == 1e3:
                nc1_fail += nc1_tilde(class_statistics(H, p.dims)) >= nc1_tilde(class_statistics(H0, p.dims))
    ok4 = report(4, "displacement bound over beta sweep", bound_fail == 0,
                 f"{bound_fail} violations, worst displacement/bound {worst:.3f}", 60)
    ok5 = report(5, "proximal step lowers nc1 at beta=1e3", nc1_fail == 0, f"{nc1_fail}/20 failures", 60)
    assert ok4 and ok5


def _neumann(W, H, p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return neumann_response(W, H, p)


def test_criterion_06_block_spectra(report):
    tol = 1e-8
    p = ModelParams(Dims(4, 10, 10), 2.0, 0.125, 100.0)
    m = collapsed_minimizer(p)
    F = _neumann(m.W_star, m.H_star, p)
    diag_err = off_err = second = 0.0
    mults = []
    for k in range(1, 5):
        for kt in range(1, 5):
            B = extract_block(F, k, kt, 4)
            sv = np.linalg.svd(B, compute_uv=False)
            if k == kt:
                diag_err = max(diag_err, abs(sv[0] - 1.0), abs(sv[-1] - 0.9975))
                mults.append(unit_eigenvalue_multiplicity(B))
            else:
                off_err = max(off_err, abs(sv[0] - 0.00125))
                second = max(second, sv[1])
    ok = diag_err <= tol and off_err <= tol and second <= 1e-10 and mults == [6] * 4
    assert report(6, "block spectra at the collapsed base", ok,
                  f"diag err {diag_err:.1e}, off-diag err {off_err:.1e}, second sigma {second:.1e}, "
                  f"unit multiplicities {mults}", 30)


def _plateaus(values, gap=1e-7):
    values = np.sort(values)
    groups = [[values[0]]]
    for v in values[1:]:
        if v - groups[-1][-1] > gap:
            groups.append([v])
        else:
            groups[-1].append(v)
    return groups


def test_criterion_07_lambda_h_sweep(report):
    tol = 1e-10
    dims = Dims(4, 10, 10)
    beta, lw = 100.0, np.sqrt(2.0)
    lhs = np.round(np.arange(0.05, 0.651, 0.05), 2)
    worst = 0.0
    missing = 0
    mins = []
    for lh, num, _ in lambda_h_sweep(dims, beta, lw, lhs):
        fam = analytic_eigen_families(ModelParams(dims, lw, lh, beta), 1, 1)
        expected = np.unique(np.concatenate([fam["lambda"], fam["lambda"] + fam["mu"] / beta]))
        for group in _plateaus(num):
            worst = max(worst, max(np.abs(np.asarray(group) - expected[np.argmin(np.abs(expected - group[0]))])))
        missing += sum(np.abs(num - e).min() > tol for e in expected)
        mins.append(num[-1])
    dec = bool(np.all(np.diff(mins) < 0))
    assert report(7, "lambda_h sweep plateaus", worst <= tol and missing == 0 and dec,
                  f"max plateau err {worst:.1e}, missing plateaus {missing}, sigma_min decreasing {dec}", 30)


def test_criterion_08_linear_response(report):
    tol = 5e-2
    p = ModelParams(Dims(3, 4, 5), 2.0, 0.125, 100.0)
    m = collapsed_minimizer(p)
    H = m.H_star
    F = exact_response(hessian_blocks(m.W_star, H, p), p, H0=H)
    cfg = SolveConfig(grad_tol=1e-13)
    base = solve_prox(H, p, cfg).H_star
    rng = np.random.default_rng(8)
    V = rng.standard_normal(H.shape)
    V /= np.linalg.norm(V)
    errs = []
    for eps in (1e-3, 1e-4):
        dH = solve_prox(H + eps * V, p, cfg).H_star - base
        pred = F.apply(eps * V.ravel(order="F"))
        errs.append(np.linalg.norm(dH.ravel(order="F") - pred) / np.linalg.norm(dH))
    shrink = errs[0] / errs[1]
    betas = np.array([1e2, 1e3, 1e4])
    gaps = []
    for beta in betas:
        q = p.with_(beta=beta)
        gaps.append(np.linalg.norm(exact_response(hessian_blocks(m.W_star, H, q), q).F - _neumann(m.W_star, H, q).F))
    slope = np.polyfit(np.log(betas), np.log(gaps), 1)[0]
    ok = max(errs) <= tol and 5 <= shrink <= 20 and abs(slope + 2) <= 0.15
    assert report(8, "linear response vs paired solves", ok,
                  f"rel errs {errs[0]:.2e}, {errs[1]:.2e} (ratio {shrink:.1f}), exact-neumann slope {slope:.3f}", 180)


def test_criterion_09_lipschitz(report):
    p = ModelParams(Dims(3, 3, 5), 2.0, 0.2, 500.0)
    rng = np.random.default_rng(9)
    pairs = []
    for i in range(100):
        H0 = rng.standard_normal(p.dims.feature_shape)
        scale = 10.0 ** rng.uniform(-4, 0)
        pairs.append((H0, H0 + scale * rng.standard_normal(H0.shape)))
    rep = lipschitz_map_check(pairs, p)
    assert report(9, "Lipschitz bounds", rep.ok,
                  f"map violations {rep.map_violations} (worst {max(rep.map_ratios):.4f} vs {rep.map_constant:.4f}), "
                  f"grad violations {rep.grad_violations} (worst {max(rep.grad_ratios):.4f} vs "
                  f"{rep.grad_constant:.4f})", 120)


def test_criterion_10_layerwise(report):
    mono = 1e-9
    p = ModelParams(Dims(3, 4, 6), 2.0, 0.125, 1e3)
    bad = []
    for seed in range(10):
        H0 = np.random.default_rng(seed).standard_normal(p.dims.feature_shape)
        nc1 = np.array([r.nc1_tilde for r in layerwise_stack(H0, p, 10)])
        if np.any(np.diff(nc1) > mono):
            bad.append(seed)
    assert report(10, "layer-wise nc1 nonincreasing", not bad, f"seeds with an increase: {bad}", 60)
