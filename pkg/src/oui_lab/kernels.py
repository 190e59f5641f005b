"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``OUI_LAB_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

from oui_lab import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("OUI_LAB_BACKEND", "").lower() != "python":
    try:
        from oui_lab import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

cartpole_step = _impl.cartpole_step
DenseStack = _impl.DenseStack
gae = _impl.gae
column_counts = _impl.column_counts
transition_counts = _impl.transition_counts

__all__ = [
    "BACKEND",
    "cartpole_step",
    "DenseStack",
    "gae",
    "column_counts",
    "transition_counts",
]
