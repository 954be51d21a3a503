"""Kernel backend selection.

Hot kernels are compiled with numba when it is importable and not disabled.
Set ``MSMCALIB_DISABLE_NUMBA=1`` to force the pure-numpy path.
"""

import os

_DISABLED = os.environ.get("MSMCALIB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by MSMCALIB_DISABLE_NUMBA")
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
    "error_model": "numpy",
}

_state = {"backend": "numba" if NUMBA_AVAILABLE else "numpy"}


def get_backend() -> str:
    return _state["backend"]


def set_backend(name: str) -> None:
    """Switch between ``"numba"`` and ``"numpy"`` kernels at runtime."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is unavailable or disabled")
    _state["backend"] = name


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it unchanged."""
    if not NUMBA_AVAILABLE:
        return func
    import numba

    return numba.njit(**numba_default)(func)
