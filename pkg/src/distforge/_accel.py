"""Kernel dispatch between numba-compiled loops and vectorised numpy.

Set ``DISTFORGE_DISABLE_NUMBA=1`` to force the numpy path everywhere. Both
paths receive the same pre-drawn random numbers, so results agree to
floating-point rounding.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_FALSY = {"", "0", "false", "no", "off"}

USE_NUMBA = (
    numba is not None
    and os.environ.get("DISTFORGE_DISABLE_NUMBA", "0").strip().lower() in _FALSY
)


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
