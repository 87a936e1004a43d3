"""Kernel dispatch: the compiled extension if it imports, numpy otherwise.

Set ``ANGLE_EMBED_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("ANGLE_EMBED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

rank_loss = _impl.rank_loss
average_ranks = _impl.average_ranks

__all__ = ["BACKEND", "rank_loss", "average_ranks"]
