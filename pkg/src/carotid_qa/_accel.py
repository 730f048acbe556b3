"""Backend switch for the hot kernels.

Set ``CAROTID_QA_BACKEND=numpy`` to force the pure-numpy code paths. The
default is ``numba`` when it is importable.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

BACKEND_ENV = "CAROTID_QA_BACKEND"

_requested = os.environ.get(BACKEND_ENV, "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise RuntimeError(f"{BACKEND_ENV} must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _requested == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` with cache on; degrades to the plain function without numba."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
