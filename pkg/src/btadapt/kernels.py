"""Kernel backend selection.

The compiled extension is used when it imports; set ``BTADAPT_PURE_PYTHON=1``
to force the pure-Python fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("BTADAPT_PURE_PYTHON") == "1":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

rect_distance = _impl.rect_distance
trace_motion = _impl.trace_motion

IN_PROGRESS = _kernels_py.IN_PROGRESS
GOAL_REACHED = _kernels_py.GOAL_REACHED
COLLISION = _kernels_py.COLLISION
FORBIDDEN_ZONE = _kernels_py.FORBIDDEN_ZONE
STEP_BUDGET = _kernels_py.STEP_BUDGET


def get_backend(name: str):
    """Return the kernel module called ``name`` ("python" or "compiled")."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
