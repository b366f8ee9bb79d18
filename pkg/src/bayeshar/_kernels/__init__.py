"""Hot numeric kernels.

The numba path is used when numba imports and ``BAYESHAR_DISABLE_JIT`` is
unset or ``0``. Set ``BAYESHAR_DISABLE_JIT=1`` to force the pure-numpy path.
The flag is read once, at import time.
"""
import importlib
import os
import warnings

from . import numpy_impl

_flag = os.environ.get("BAYESHAR_DISABLE_JIT", "0").strip().lower()
JIT_REQUESTED = _flag not in ("1", "true", "yes", "on")

numba_impl = None
if JIT_REQUESTED:
    try:
        # not "from . import": that would return the None bound above
        numba_impl = importlib.import_module(".numba_impl", __name__)
    except ImportError:  # pragma: no cover - numba is a hard dependency
        warnings.warn("numba unavailable, using numpy kernels")

USING_NUMBA = numba_impl is not None
_active = numba_impl if USING_NUMBA else numpy_impl

iir_filter = _active.iir_filter
pairwise_sqdist = _active.pairwise_sqdist
mine_hard = _active.mine_hard
mine_semihard = _active.mine_semihard
mine_second_negative = _active.mine_second_negative

__all__ = [
    "USING_NUMBA",
    "iir_filter",
    "pairwise_sqdist",
    "mine_hard",
    "mine_semihard",
    "mine_second_negative",
    "numpy_impl",
    "numba_impl",
]
