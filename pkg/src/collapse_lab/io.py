"""CSV readers/writers.  Floats are written with ``repr`` so reruns are byte-identical."""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np
import yaml

from .errors import ShapeError
from .ufm import Dims

_HEADER = re.compile(r"#\s*d=(\d+)\s+K=(\d+)\s+n=(\d+)\s*$")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def config_header(config: dict) -> list[str]:
    """Config echo as ``#``-prefixed YAML lines."""
    text = yaml.safe_dump(config, sort_keys=True, default_flow_style=False)
    return ["# config:"] + ["#   " + line for line in text.rstrip("\n").split("\n")]


def write_table(path, columns, rows, config: dict | None = None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        if config is not None:
            for line in config_header(config):
                fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(x) for x in row])
    return path


def read_table(path):
    """Return ``(columns, rows)`` with comment lines skipped; cells stay strings."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    columns = next(reader)
    return columns, [row for row in reader]


def write_matrix(path, X, dims: Dims):
    """Row-major CSV with a ``# d=.. K=.. n=..`` header."""
    X = np.asarray(X, dtype=float)
    if X.shape not in (dims.feature_shape, dims.weight_shape):
        raise ShapeError(f"matrix shape {X.shape} fits neither features nor weights for {dims}")
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# d={dims.d} K={dims.K} n={dims.n}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in X:
            w.writerow([repr(float(v)) for v in row])
    return path


def read_matrix(path):
    """Inverse of :func:`write_matrix`; returns ``(X, dims)``."""
    with Path(path).open() as fh:
        first = fh.readline()
        m = _HEADER.match(first.strip())
        if m is None:
            raise ShapeError(f"{path}: missing '# d=<d> K=<K> n=<n>' header")
        d, K, n = (int(g) for g in m.groups())
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    dims = Dims(K=K, n=n, d=d)
    X = np.array(rows, dtype=float)
    if X.shape not in (dims.feature_shape, dims.weight_shape):
        raise ShapeError(f"{path}: matrix shape {X.shape} does not match header {dims}")
    return X, dims
