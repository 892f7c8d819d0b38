"""Pick the central-path kernel implementation at import time.

The compiled extension is preferred; setting ``COLLAPSE_LAB_PURE_PYTHON=1``
forces the numpy fallback.
"""
import importlib
import os

from . import _kernels_py


def load(name):
    """Return the kernel module for ``name`` in {"cython", "python"}."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("collapse_lab._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available():
    names = ["python"]
    try:
        load("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if os.environ.get("COLLAPSE_LAB_PURE_PYTHON"):
    BACKEND = "python"
else:
    BACKEND = available()[0]

kernels = load(BACKEND)
