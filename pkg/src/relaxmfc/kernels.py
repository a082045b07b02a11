"""Hot loops, compiled when the extension is built.

Set ``MFC_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND`` names
the implementation that was picked at import.
"""

import os

from . import _kernels_py

if os.environ.get("MFC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

circle_w1_sorted = _impl.circle_w1_sorted
dp_backup = _impl.dp_backup
project_simplex_rows = _impl.project_simplex_rows

__all__ = ["BACKEND", "circle_w1_sorted", "dp_backup", "project_simplex_rows"]
