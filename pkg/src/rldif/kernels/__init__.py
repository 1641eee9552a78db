"""Hot numeric kernels with numba-compiled and pure-numpy backends.

Every kernel is a self-contained function compiled with numba's @njit when
available. Selection is controlled by the RLDIF_KERNELS environment
variable:

    RLDIF_KERNELS=numba   require numba (ImportError if missing)
    RLDIF_KERNELS=numpy   force the uncompiled numpy path
    RLDIF_KERNELS=auto    numba if importable, numpy otherwise (default)

Both backends stay importable (``*_numba`` / ``*_numpy`` names) so the
benchmark in benchmarks/kernel_bench.py can compare them in one process.
The BLAS-bound training math does not live here: numpy's matmul already
runs at hardware speed and would gain nothing from numba.
"""

import os

from . import _kernels

_choice = os.environ.get("RLDIF_KERNELS", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"RLDIF_KERNELS must be auto/numba/numpy, got {_choice!r}")

HAS_NUMBA = False
if _choice in ("auto", "numba"):
    try:
        import numba

        HAS_NUMBA = True
    except ImportError:
        if _choice == "numba":
            raise

tm_search_numpy = _kernels.tm_search
nw_fill_numpy = _kernels.nw_fill_numpy
toy_chain_numpy = _kernels.toy_chain

if HAS_NUMBA:
    _njit = numba.njit(cache=True)
    tm_search_numba = _njit(_kernels.tm_search)
    nw_fill_numba = _njit(_kernels.nw_fill)
    toy_chain_numba = _njit(_kernels.toy_chain)
else:
    tm_search_numba = None
    nw_fill_numba = None
    toy_chain_numba = None

USE_NUMBA = HAS_NUMBA and _choice != "numpy"

if USE_NUMBA:
    tm_search = tm_search_numba
    nw_fill = nw_fill_numba
    toy_chain = toy_chain_numba
else:
    tm_search = tm_search_numpy
    nw_fill = nw_fill_numpy
    toy_chain = toy_chain_numpy


def backend() -> str:
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"
