"""Kernel backend selection.

The per-snapshot Q evaluation sits inside every stochastic-approximation
iteration and Monte Carlo trial, so a compiled Cython version is used
when available.  Set ``QRES_PURE_PYTHON=1`` to force the NumPy fallback.
Batched evaluation is already vectorized and shared by both backends.
"""

from __future__ import annotations

import os

from . import _qcore_py
from ._qcore_py import (  # noqa: F401  (shared helpers)
    PIVOT_RATIO_LIMIT,
    STATUS_ILL_CONDITIONED,
    STATUS_OK,
    q_batch,
    steer,
)

if os.environ.get("QRES_PURE_PYTHON"):
    _impl = _qcore_py
else:
    try:
        from . import _qcore as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _qcore_py

BACKEND = _impl.BACKEND
q_eval = _impl.q_eval
