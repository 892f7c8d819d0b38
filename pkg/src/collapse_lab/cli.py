"""``collapse-lab`` command-line front end.

Exit codes: 0 when every check passed, 1 when a check failed, 2 for a bad
config (nothing is written in that case).
"""
from __future__ import annotations

import argparse
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .central_path import FlowConfig, flow_integrate
from .config import ConfigError
from .errors import CollapseLabError, DegenerateModel
from .io import read_matrix, write_matrix, write_table
from .metrics import METRIC_COLUMNS
from .perturbation import (
    analytic_block_spectrum,
    exact_response,
    extract_block,
    hessian_blocks,
    lambda_h_sweep,
    neumann_response,
    spectrum_rows,
    block_spectrum,
    unit_eigenvalue_multiplicity,
)
from .prox import SolveConfig, layerwise_stack
from .ufm import Dims, ModelParams, class_means, collapsed_minimizer, minimize_numeric, minimum_value

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
SUMMARY_COLUMNS = ("check", "value", "limit", "pass")


def thread_count() -> int:
    raw = os.environ.get("COLLAPSE_LAB_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"COLLAPSE_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"COLLAPSE_LAB_THREADS must be a positive integer, got {raw!r}")
    return value


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _dims(cfg):
    return Dims(**cfg["dims"])


class Campaign:
    """Collects summary checks and writes CSVs into the output directory."""

    def __init__(self, cfg, out: Path, strict: bool):
        self.cfg = cfg
        self.out = out
        self.strict = strict
        self.checks = []

    def check(self, name, value, limit, ok, advisory=False):
        # advisory checks only fail the run under --strict
        self.checks.append((name, value, limit, bool(ok), advisory))

    def table(self, name, columns, rows):
        write_table(self.out / name, columns, rows, self.cfg)

    def finish(self) -> int:
        rows = [[n, v, lim, ok] for n, v, lim, ok, _ in self.checks]
        self.table("summary.csv", SUMMARY_COLUMNS, rows)
        failed = [c for c in self.checks if not c[3] and (self.strict or not c[4])]
        for name, value, limit, _, _ in failed:
            print(f"FAIL {name}: value={value!r} limit={limit!r}", file=sys.stderr)
        return EXIT_FAIL if failed else EXIT_OK


def run_minimize(cfg, camp: Campaign, threads: int):
    dims = _dims(cfg)
    p = ModelParams(dims, cfg["lambda_w"], cfg["lambda_h"])
    tol = cfg["tol"]
    seeds = range(cfg["seed"], cfg["seed"] + cfg["n_runs"])
    target = minimum_value(p)
    degenerate = p.c >= 1
    rho = None if degenerate else p.rho

    def cell(seed):
        W, H, value = minimize_numeric(p, seed=seed, scale=cfg["init_scale"])
        gap = abs(value - target) / abs(target)
        if degenerate:
            size = float(np.hypot(np.linalg.norm(W), np.linalg.norm(H)))
            ok = gap <= tol["objective_rel"] and size <= tol["zero_norm"]
            return [seed, p.c, value, target, gap, "", "", size, "zero_solution", ok]
        Hbar = class_means(H, dims)
        G = Hbar.T @ Hbar
        gram = float(np.max(np.abs(G - rho * np.eye(dims.K))))
        rho_err = float(abs(np.mean(np.diag(G)) - rho))
        size = float(np.hypot(np.linalg.norm(W), np.linalg.norm(H)))
        ok = gap <= tol["objective_rel"] and gram <= tol["gram_abs"]
        return [seed, p.c, value, target, gap, gram, rho_err, size, "collapsed", ok]

    rows = _pmap(cell, seeds, threads)
    camp.table(
        "minimize.csv",
        ("seed", "c", "objective_numeric", "objective_analytic", "objective_gap_rel", "gram_residual",
         "rho_error", "solution_norm", "regime", "pass"),
        rows,
    )
    camp.check("runs_passed", sum(r[-1] for r in rows), len(rows), all(r[-1] for r in rows))


def _flow_start(cfg, p, dims):
    if cfg["init"] == "collapsed":
        return collapsed_minimizer(p, seed=cfg["seed"]).H_star
    if cfg["init"] == "file":
        return read_matrix(cfg["init_path"])[0]
    rng = np.random.default_rng(cfg["seed"])
    return cfg["init_scale"] * rng.standard_normal(dims.feature_shape)


def run_flow(cfg, camp: Campaign, threads: int):
    dims = _dims(cfg)
    tol = cfg["tol"]
    fc = FlowConfig(t_end=cfg["t_end"], dt=cfg["dt"], max_halvings=cfg["max_halvings"],
                    record_every=cfg["record_every"])
    cells = [ModelParams(dims, cfg["lambda_w"], lh) for lh in cfg["lambda_hs"]]
    starts = [_flow_start(cfg, p, dims) for p in cells]

    traces = _pmap(lambda i: flow_integrate(starts[i], cells[i], fc), range(len(cells)), threads)
    summary = []
    for i, (p, tr) in enumerate(zip(cells, traces)):
        rows = [s.report.row() + [s.loss] for s in tr.samples]
        camp.table(f"flow_{i:02d}.csv", METRIC_COLUMNS + ("loss",), rows)

        nc1 = tr.column("nc1_tilde")
        active = nc1[:-1] > tol["nc1_floor"]
        tw, tb = tr.weighted_trsw(), tr.weighted_trsb()
        nc1_ok = bool(np.all(np.diff(nc1)[active] < 0))
        tw_ok = bool(np.all(np.diff(tw) <= tol["monotone"] * (1 + np.abs(tw[:-1]))))
        tb_ok = bool(np.all(np.diff(tb)[active] > 0))
        trsw = tr.column("trSW")
        rate = expected = ""
        rate_ok = True
        if p.lambda_h > 0 and np.all(trsw > 0):
            rate = tr.decay_rate()
            expected = -2 * p.lambda_h
            rate_ok = rate <= expected * (1 - tol["rate_rel"])
        t = tr.t
        t_ok = bool(np.all(np.diff(t) > 0))
        ok = nc1_ok and tw_ok and tb_ok and rate_ok and t_ok
        summary.append([i, p.lambda_h, len(tr.samples), tr.halvings, nc1_ok, tw_ok, tb_ok, t_ok, rate, expected, ok])
        camp.check(f"flow_{i:02d}", int(ok), 1, ok)
    camp.table("flow_summary.csv",
               ("index", "lambda_h", "samples", "halvings", "nc1_decreasing", "weighted_trsw_nonincreasing",
                "weighted_trsb_increasing", "t_increasing", "decay_rate", "expected_rate", "pass"),
               summary)


def run_perturb(cfg, camp: Campaign, threads: int):
    dims = _dims(cfg)
    tol = cfg["tol"]
    K = dims.K
    p = ModelParams(dims, cfg["lambda_w"], cfg["lambda_h"], cfg["beta"])
    m = collapsed_minimizer(p, seed=cfg["seed"])
    F = neumann_response(m.W_star, m.H_star, p)

    pairs = [(k, kt) for k in range(1, K + 1) for kt in range(1, K + 1)]
    spectra = _pmap(lambda kk: block_spectrum(F, p, *kk), pairs, threads)
    camp.table("block_spectra.csv", ("k", "ktilde", "index", "sigma_numeric", "sigma_analytic", "abs_err"),
               spectrum_rows(spectra, p))
    worst = max(float(np.max(np.abs(s.singular_values - s.analytic["sigma"]))) for s in spectra)
    camp.check("block_spectrum_max_abs_err", worst, tol["spectrum_abs"], worst <= tol["spectrum_abs"])
    off = [s.singular_values for s in spectra if s.k != s.kt]
    if off:
        second = max(float(sv[1] / sv[0]) for sv in off)
        camp.check("offdiag_second_sigma_rel", second, tol["rank_rel"], second <= tol["rank_rel"])
    mult = min(unit_eigenvalue_multiplicity(extract_block(F, k, k, K), tol["unit_eig"]) for k in range(1, K + 1))
    camp.check("unit_eigenvalue_multiplicity", mult, dims.d - K, mult == dims.d - K)

    fig = cfg["lambda_h_sweep"]
    if fig is not None:
        sweep = lambda_h_sweep(dims, fig["beta"], fig["lambda_w"], fig["lambda_hs"], seed=cfg["seed"])
        rows = []
        for lh, num, ana in sweep:
            rows += [[lh, i, float(a), float(b), abs(float(a) - float(b))] for i, (a, b) in enumerate(zip(num, ana))]
        camp.table("lambda_h_sweep.csv", ("lambda_h", "index", "sigma_numeric", "sigma_analytic", "abs_err"), rows)
        err = max(r[-1] for r in rows)
        camp.check("lambda_h_sweep_max_abs_err", err, tol["plateau_abs"], err <= tol["plateau_abs"])
        order = np.argsort(fig["lambda_hs"])
        mins = np.array([sweep[i][1][-1] for i in order])
        dec = bool(np.all(np.diff(mins) < 0))
        camp.check("lambda_h_sweep_sigma_min_decreasing", int(dec), 1, dec)

    sweep = cfg["beta_sweep"]
    if sweep is not None:
        rows = []
        for beta in sweep["betas"]:
            q = p.with_(beta=float(beta))
            mq = collapsed_minimizer(q, seed=cfg["seed"])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                Fn = neumann_response(mq.W_star, mq.H_star, q)
            Fe = exact_response(hessian_blocks(mq.W_star, mq.H_star, q), q)
            diff = float(np.linalg.norm(Fe.matrix() - Fn.F))
            rows.append([float(beta), diff, float(np.linalg.norm(Fn.F - np.eye(Fn.size)))])
        camp.table("beta_sweep.csv", ("beta", "exact_minus_neumann", "neumann_minus_identity"), rows)
        slope = float(np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0])
        camp.check("beta_sweep_slope", slope, f"-2+-{tol['slope']}", abs(slope + 2) <= tol["slope"])


def run_layerwise(cfg, camp: Campaign, threads: int):
    dims = _dims(cfg)
    p = ModelParams(dims, cfg["lambda_w"], cfg["lambda_h"], cfg["beta"])
    sc = SolveConfig(grad_tol=cfg["grad_tol"], max_iters=cfg["max_iters"])
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["n_runs"]))
    mono = cfg["tol"]["monotone"]

    def cell(seed):
        H0 = cfg["init_scale"] * np.random.default_rng(seed).standard_normal(dims.feature_shape)
        return H0, layerwise_stack(H0, p, cfg["depth"], sc)

    results = _pmap(cell, seeds, threads)
    rows = []
    violations = 0
    for seed, (H0, reports) in zip(seeds, results):
        for r in reports:
            rows.append([seed, r.step, r.nc1_tilde, r.nc1_fisher, r.nc2, r.nc3, r.trSW, r.trSB])
        nc1 = np.array([r.nc1_tilde for r in reports])
        violations += int(np.sum(np.diff(nc1) > mono))
        if cfg["save_features"]:
            write_matrix(camp.out / f"layerwise_H0_seed{seed}.csv", H0, dims)
    camp.table("layerwise.csv", ("seed", "layer", "nc1_tilde", "nc1_fisher", "nc2", "nc3", "trSW", "trSB"), rows)
    camp.check("nc1_increases", violations, 0, violations == 0, advisory=True)


COMMAND_RUNNERS = {
    "minimize": run_minimize,
    "flow": run_flow,
    "perturb": run_perturb,
    "layerwise": run_layerwise,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="collapse-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=config_mod.COMMANDS)
    ap.add_argument("--config", required=True, help="YAML experiment config")
    ap.add_argument("--out", required=True, help="output directory (created if missing)")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--strict", action="store_true",
                    help="treat advisory checks and runtime warnings as failures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = config_mod.load(args.command, args.config, seed=args.seed)
        threads = thread_count()
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} exists and is not a directory")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out.mkdir(parents=True, exist_ok=True)
    camp = Campaign(cfg, out, args.strict)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            COMMAND_RUNNERS[args.command](cfg, camp, threads)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        camp.check("runtime_warnings", len(caught), 0, not caught, advisory=True)
    except (CollapseLabError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, DegenerateModel):
            print(f"degenerate model: {exc}", file=sys.stderr)
        else:
            print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        camp.check(type(exc).__name__, str(exc), "", False)
    return camp.finish()


if __name__ == "__main__":
    sys.exit(main())
