"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built; otherwise the pure
NumPy fallback is imported. Set ``CTXT_PURE_PYTHON=1`` to force the
fallback (the benchmark and the backend-parity tests use :func:`get_backend`).
"""

import os
from types import ModuleType

from . import _core_py

try:
    from . import _core as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _core_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        if os.environ.get("CTXT_PURE_PYTHON") or _compiled is None:
            return _core_py
        return _compiled
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None


_active = get_backend()
BACKEND_NAME = "cython" if _active is _compiled else "python"

lattice_forward_backward = _active.lattice_forward_backward
levenshtein_table = _active.levenshtein_table
lstm_recurrence_forward = _active.lstm_recurrence_forward
lstm_recurrence_backward = _active.lstm_recurrence_backward


def set_backend(name: str) -> str:
    """Swap the active kernels process-wide; returns the previous backend name."""
    global _active, BACKEND_NAME, lattice_forward_backward, levenshtein_table
    global lstm_recurrence_forward, lstm_recurrence_backward
    previous = BACKEND_NAME
    _active = get_backend(name)
    BACKEND_NAME = name
    lattice_forward_backward = _active.lattice_forward_backward
    levenshtein_table = _active.levenshtein_table
    lstm_recurrence_forward = _active.lstm_recurrence_forward
    lstm_recurrence_backward = _active.lstm_recurrence_backward
    return previous
