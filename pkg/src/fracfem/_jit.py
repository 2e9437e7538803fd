"""Backend selection for the hot loops.

Set ``FRACFEM_NO_JIT=1`` to force the pure-numpy code path.  Both paths
produce the same matrices up to summation order.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

BACKENDS = ("numba", "numpy")


def default_backend() -> str:
    flag = os.environ.get("FRACFEM_NO_JIT", "").strip().lower()
    if numba is None or flag in ("1", "true", "yes", "on"):
        return "numpy"
    return "numba"


def resolve_backend(backend: str | None) -> str:
    if backend is None:
        return default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    if backend == "numba" and numba is None:
        raise RuntimeError("numba backend requested but numba is not installed")
    return backend


def njit(fn):
    """Compile with numba when available; the python function stays usable."""
    if numba is None:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)
