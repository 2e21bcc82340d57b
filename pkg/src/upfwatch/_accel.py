"""Backend switch for the numeric kernels.

Kernels are written once as numba ``@njit`` functions and once in plain
numpy. ``UPFWATCH_DISABLE_NUMBA=1`` (or numba missing) selects numpy.
Both paths must produce bit-identical results; tests hold them to that.
"""
import os

_FALSEY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

NUMBA_DISABLED = os.environ.get("UPFWATCH_DISABLE_NUMBA", "").strip().lower() not in _FALSEY
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise.

    Compilation happens lazily on first call, so importing with numba
    disabled costs nothing.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
