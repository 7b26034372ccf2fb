"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the pure-Python
version is loaded. Set ``AVSR_TEMPORAL_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _editdist_py

BACKEND = "python"
edit_distance = _editdist_py.edit_distance

if os.environ.get("AVSR_TEMPORAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _editdist as _compiled
    except ImportError:  # extension not built
        pass
    else:
        edit_distance = _compiled.edit_distance
        BACKEND = "cython"


def backends() -> dict:
    """All importable implementations, keyed by name."""
    found = {"python": _editdist_py.edit_distance}
    try:
        from . import _editdist as _compiled
    except ImportError:
        return found
    found["cython"] = _compiled.edit_distance
    return found
