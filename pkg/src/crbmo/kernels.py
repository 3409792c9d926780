"""Kernel dispatch: compiled extension when built, numpy twin otherwise.

Set ``CRBMO_PURE_PYTHON=1`` before import to force the numpy path.
"""
from __future__ import annotations

import os

import numpy as np

from crbmo import _kernels_py

if os.environ.get("CRBMO_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from crbmo import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

backend = "cython" if _impl is not _kernels_py else "numpy"

COND_MAX = 1e12


def crb_batch(A, rows, vals, gamma, want_grad=False, cond_max=COND_MAX, impl=None):
    impl = impl or _impl
    return impl.crb_batch(
        np.ascontiguousarray(A, dtype=complex),
        np.ascontiguousarray(rows, dtype=np.intp),
        np.ascontiguousarray(vals, dtype=complex),
        float(gamma),
        bool(want_grad),
        float(cond_max),
    )


def ml_metric_batch(S, rows, vals, y, impl=None):
    impl = impl or _impl
    return impl.ml_metric_batch(
        np.ascontiguousarray(S, dtype=complex),
        np.ascontiguousarray(rows, dtype=np.intp),
        np.ascontiguousarray(vals, dtype=complex),
        np.ascontiguousarray(y, dtype=complex),
    )


def implementations():
    """All importable kernel implementations keyed by backend name."""
    out = {"numpy": _kernels_py}
    try:
        from crbmo import _kernels
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out
