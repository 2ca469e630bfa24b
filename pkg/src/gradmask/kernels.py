"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``GRADMASK_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("GRADMASK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def _csr(indptr, indices):
    return np.ascontiguousarray(indptr, dtype=np.int64), np.ascontiguousarray(indices, dtype=np.int64)


def bfs_all_pairs(indptr, indices, n: int, impl=None) -> np.ndarray:
    """Unweighted all-pairs hop counts; ``inf`` marks unreachable pairs."""
    ip, ix = _csr(indptr, indices)
    return (impl or _impl).bfs_all_pairs(ip, ix, n)


def dijkstra_all_pairs(indptr, indices, weights, n: int, impl=None) -> np.ndarray:
    """Weighted all-pairs distances for non-negative CSR edge weights."""
    ip, ix = _csr(indptr, indices)
    w = np.ascontiguousarray(weights, dtype=np.float64)
    return (impl or _impl).dijkstra_all_pairs(ip, ix, w, n)
