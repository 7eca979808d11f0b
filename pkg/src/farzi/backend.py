"""Kernel backend selection.

The elementwise optimizer updates are the hot inner loops; they exist in
two flavors: numba ``@njit`` kernels and plain-numpy fallbacks that are
bit-identical. Selection is driven by the ``FARZI_BACKEND`` env var:

  auto   (default) use numba when importable, else numpy
  numba  require numba, error if missing
  numpy  force the pure-numpy path

``FARZI_THREADS`` caps numba's thread pool.
"""

import os

_choice = os.environ.get("FARZI_BACKEND", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError("FARZI_BACKEND must be auto, numba or numpy")

numba = None
if _choice in ("auto", "numba"):
    try:
        import numba  # noqa: F401
    except ImportError:
        if _choice == "numba":
            raise
        numba = None

if numba is not None and "FARZI_THREADS" in os.environ:
    numba.set_num_threads(max(1, int(os.environ["FARZI_THREADS"])))

USE_NUMBA = numba is not None


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def njit_or_plain(fn=None, **opts):
    """``numba.njit`` under the numba backend, identity otherwise."""
    if fn is None:
        return lambda f: njit_or_plain(f, **opts)
    if USE_NUMBA:
        opts.setdefault("cache", True)
        return numba.njit(fn, **opts)
    return fn
