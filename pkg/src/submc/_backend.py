"""Backend selection for the hot numeric kernels.

Two implementations exist for every hot inner loop: a numba ``@njit``
driver (``submc._jit``) and a pure-numpy path that steps the instrumented
kernel objects directly.  Both consume the driving randomness in exactly
the same order, so a fixed seed yields the same trajectory on either
backend (up to floating-point association in likelihood sums).

The default backend is numba when importable.  Set the environment
variable ``SUBMC_BACKEND=numpy`` before import (or call ``set_backend``)
to force the fallback.  ``benchmarks/backend_bench.py`` compares the two.
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_VALID = ("numba", "numpy")


def _from_env() -> str:
    raw = os.environ.get("SUBMC_BACKEND", "").strip().lower()
    if raw in _VALID:
        if raw == "numba" and not _HAVE_NUMBA:
            raise RuntimeError("SUBMC_BACKEND=numba requested but numba is not importable")
        return raw
    if raw:
        raise RuntimeError(f"SUBMC_BACKEND must be one of {_VALID}, got {raw!r}")
    return "numba" if _HAVE_NUMBA else "numpy"


_backend = _from_env()


def backend() -> str:
    """Return the active backend name, ``"numba"`` or ``"numpy"``."""
    return _backend


def set_backend(name: str) -> str:
    """Select the backend at runtime; returns the previous one."""
    global _backend
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev, _backend = _backend, name
    return prev


def using_numba() -> bool:
    return _backend == "numba"
