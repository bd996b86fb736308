"""Kernel backend selection.

Hot numeric kernels ship in two variants: a numba ``@njit`` build and a
pure-numpy fallback.  The active backend is chosen once at import from the
``UPFLOW_NUMBA`` environment variable (any value other than ``"0"`` enables
numba) and can be switched at runtime with :func:`set_numba`, which the test
suite and the benchmark use to exercise both paths.
"""

import os

_numba_enabled = os.environ.get("UPFLOW_NUMBA", "1") != "0"


def numba_enabled() -> bool:
    return _numba_enabled


def set_numba(enabled: bool) -> None:
    global _numba_enabled
    _numba_enabled = bool(enabled)
