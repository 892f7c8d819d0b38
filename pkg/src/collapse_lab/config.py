"""Experiment config schema: defaults, loading and validation.

Configs are YAML mappings.  Every key is optional except ``schema_version``;
unknown keys are rejected so that a renamed field never passes silently.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from .errors import CollapseLabError, PreconditionError
from .io import read_matrix
from .ufm import Dims, ModelParams

SCHEMA_VERSION = 1
COMMANDS = ("minimize", "flow", "perturb", "layerwise")


class ConfigError(CollapseLabError):
    """The experiment config is malformed or violates a precondition."""


DEFAULTS = {
    "minimize": {
        "dims": {"K": 4, "n": 10, "d": 10},
        "lambda_w": 2.0,
        "lambda_h": 0.125,
        "seed": 0,
        "n_runs": 10,
        "init_scale": 1.0,
        "tol": {"objective_rel": 1e-6, "gram_abs": 1e-4, "zero_norm": 1e-4},
    },
    "flow": {
        "dims": {"K": 3, "n": 4, "d": 6},
        "lambda_w": 2.0,
        "lambda_hs": [0.0, 0.1, 0.5],
        "seed": 0,
        "init": "random",
        "init_scale": 1.0,
        "init_path": None,
        "t_end": 5.0,
        "dt": 1e-3,
        "record_every": 100,
        "max_halvings": 20,
        "tol": {"monotone": 1e-9, "rate_rel": 0.1, "nc1_floor": 1e-12},
    },
    "perturb": {
        "dims": {"K": 4, "n": 10, "d": 10},
        "beta": 100.0,
        "lambda_w": 2.0,
        "lambda_h": 0.125,
        "seed": 0,
        "lambda_h_sweep": {
            "beta": 100.0,
            "lambda_w": 1.4142135623730951,
            "lambda_hs": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65],
        },
        "beta_sweep": {"betas": [100.0, 1000.0, 10000.0]},
        "tol": {"spectrum_abs": 1e-8, "plateau_abs": 1e-10, "rank_rel": 1e-10, "unit_eig": 1e-10, "slope": 0.15},
    },
    "layerwise": {
        "dims": {"K": 3, "n": 4, "d": 6},
        "lambda_w": 2.0,
        "lambda_h": 0.125,
        "beta": 1000.0,
        "depth": 10,
        "seed": 0,
        "n_runs": 10,
        "init_scale": 1.0,
        "grad_tol": 1e-10,
        "max_iters": 20000,
        "save_features": False,
        "tol": {"monotone": 1e-9},
    },
}


def _merge(defaults, given, where):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict) and defaults[key] and "K" not in defaults[key]:
            if value is None:
                out[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            out[key] = _merge(defaults[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _num(cfg, key, where, lo=None, lo_open=False, integer=False):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise ConfigError(f"{where}{key} must be {'an integer' if integer else 'a number'}, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{where}{key} must be finite")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{where}{key} must be {'>' if lo_open else '>='} {lo}, got {v}")
    return v


def _num_list(cfg, key, where, lo=None, lo_open=False):
    v = cfg[key]
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{where}{key} must be a nonempty list")
    for i in range(len(v)):
        _num({"x": v[i]}, "x", f"{where}{key}[{i}] ", lo=lo, lo_open=lo_open)
    return v


def _dims(cfg, rich=False):
    d = cfg["dims"]
    if not isinstance(d, dict) or set(d) != {"K", "n", "d"}:
        raise ConfigError("dims must be a mapping with exactly K, n, d")
    for k in ("K", "n", "d"):
        _num(d, k, "dims.", lo=1, integer=True)
    try:
        dims = Dims(K=d["K"], n=d["n"], d=d["d"])
        if rich:
            dims.require_rich(strict=rich == "strict")
        return dims
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc


def _params(dims, lambda_w, lambda_h, beta=1e3):
    try:
        return ModelParams(dims, float(lambda_w), float(lambda_h), float(beta))
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc


def _tol(cfg):
    for key in cfg["tol"]:
        _num(cfg["tol"], key, "tol.", lo=0, lo_open=True)


def _validate_minimize(cfg):
    dims = _dims(cfg, rich=True)
    _params(dims, _num(cfg, "lambda_w", "", 0, True), _num(cfg, "lambda_h", "", 0, True))
    _num(cfg, "seed", "", 0, integer=True)
    _num(cfg, "n_runs", "", 1, integer=True)
    _num(cfg, "init_scale", "", 0, True)
    _tol(cfg)


def _validate_flow(cfg):
    dims = _dims(cfg)
    _num(cfg, "lambda_w", "", 0, True)
    for lh in _num_list(cfg, "lambda_hs", "", lo=0):
        p = _params(dims, cfg["lambda_w"], lh)
        if cfg["init"] == "collapsed" and not (lh > 0 and p.c < 1 and dims.d >= dims.K):
            raise ConfigError(f"init=collapsed needs d >= K, lambda_h > 0 and lambda_h*lambda_w < 1 (lambda_h={lh})")
    if cfg["init"] not in ("random", "collapsed", "file"):
        raise ConfigError("init must be one of random, collapsed, file")
    if cfg["init"] == "file":
        if not isinstance(cfg["init_path"], str) or not Path(cfg["init_path"]).is_file():
            raise ConfigError("init=file needs init_path pointing to an existing matrix CSV")
        try:
            H, file_dims = read_matrix(cfg["init_path"])
        except (CollapseLabError, ValueError) as exc:
            raise ConfigError(f"init_path: {exc}") from exc
        if file_dims != dims or H.shape != dims.feature_shape:
            raise ConfigError(f"init_path holds a {H.shape} matrix for {file_dims}, config says {dims}")
    _num(cfg, "seed", "", 0, integer=True)
    _num(cfg, "init_scale", "", 0, True)
    _num(cfg, "t_end", "", 0, True)
    _num(cfg, "dt", "", 0, True)
    if cfg["dt"] > cfg["t_end"]:
        raise ConfigError("dt must not exceed t_end")
    _num(cfg, "record_every", "", 1, integer=True)
    _num(cfg, "max_halvings", "", 0, integer=True)
    _tol(cfg)


def _validate_perturb(cfg):
    dims = _dims(cfg, rich="strict")
    p = _params(dims, _num(cfg, "lambda_w", "", 0, True), _num(cfg, "lambda_h", "", 0, True),
                _num(cfg, "beta", "", 0, True))
    if p.c >= 1:
        raise ConfigError("perturb needs lambda_h * lambda_w < 1")
    _num(cfg, "seed", "", 0, integer=True)
    fig = cfg["lambda_h_sweep"]
    if fig is not None:
        _num(fig, "beta", "lambda_h_sweep.", 0, True)
        _num(fig, "lambda_w", "lambda_h_sweep.", 0, True)
        for lh in _num_list(fig, "lambda_hs", "lambda_h_sweep.", lo=0, lo_open=True):
            if _params(dims, fig["lambda_w"], lh, fig["beta"]).c >= 1:
                raise ConfigError(f"lambda_h_sweep lambda_h={lh} gives lambda_h*lambda_w >= 1")
    sweep = cfg["beta_sweep"]
    if sweep is not None:
        betas = _num_list(sweep, "betas", "beta_sweep.", lo=0, lo_open=True)
        if len(set(betas)) < 2:
            raise ConfigError("beta_sweep.betas needs at least two distinct values")
    _tol(cfg)


def _validate_layerwise(cfg):
    dims = _dims(cfg)
    _params(dims, _num(cfg, "lambda_w", "", 0, True), _num(cfg, "lambda_h", "", 0),
            _num(cfg, "beta", "", 0, True))
    _num(cfg, "depth", "", 0, integer=True)
    _num(cfg, "seed", "", 0, integer=True)
    _num(cfg, "n_runs", "", 1, integer=True)
    _num(cfg, "init_scale", "", 0, True)
    _num(cfg, "grad_tol", "", 0, True)
    _num(cfg, "max_iters", "", 1, integer=True)
    if not isinstance(cfg["save_features"], bool):
        raise ConfigError("save_features must be true or false")
    _tol(cfg)


_VALIDATORS = {
    "minimize": _validate_minimize,
    "flow": _validate_flow,
    "perturb": _validate_perturb,
    "layerwise": _validate_layerwise,
}


def resolve(command: str, raw, seed=None) -> dict:
    """Merge ``raw`` over the defaults for ``command`` and validate; raises :class:`ConfigError`."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a YAML mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    named = raw.pop("command", command)
    if named != command:
        raise ConfigError(f"config is for command {named!r}, not {command!r}")
    cfg = _merge(DEFAULTS[command], raw, "")
    if seed is not None:
        cfg["seed"] = seed
    _VALIDATORS[command](cfg)
    cfg["schema_version"] = SCHEMA_VERSION
    cfg["command"] = command
    return cfg


def load(command: str, path, seed=None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return resolve(command, raw, seed=seed)
