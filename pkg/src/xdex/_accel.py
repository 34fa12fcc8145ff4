"""Kernel backend selection.

Set ``XDEX_KERNELS=numpy`` to force the pure-numpy path. The default is
``numba`` when it imports, otherwise numpy.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_requested = os.environ.get("XDEX_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"XDEX_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = numba is not None
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator.

    Kernels are always compiled when numba exists so that benchmarks and
    tests can compare both paths within one process; ``BACKEND`` decides
    which path the public API dispatches to.
    """
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
