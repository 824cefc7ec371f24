"""Kernel backend selection.

The compiled extension is used when it imports; setting ``DILO_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("DILO_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _idx(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def chi2_conjugate(y, impl=None):
    """Elementwise chi-square conjugate and its derivative (the clamped ratio)."""
    return (impl or _impl).chi2_conjugate(_f64(np.ravel(y)))


def gather_pairs(table, i, j, impl=None):
    return (impl or _impl).gather_pairs(_f64(table), _idx(i), _idx(j))


def scatter_add_pairs(table, i, j, vals, impl=None):
    """``table[i, j] += vals`` with repeated indices accumulated. ``table`` must be C-contiguous float64."""
    if not (table.flags.c_contiguous and table.dtype == np.float64):
        raise ValueError("table must be a C-contiguous float64 array")
    (impl or _impl).scatter_add_pairs(table, _idx(i), _idx(j), _f64(vals))


def pair_value_iteration(P, reward, gamma, tol=1e-12, max_iter=100_000, impl=None):
    return (impl or _impl).pair_value_iteration(
        _f64(P), _f64(reward), float(gamma), float(tol), int(max_iter)
    )
