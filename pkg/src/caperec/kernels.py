"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``CAPEREC_BACKEND=python`` to force the fallback at import time, or call
:func:`set_backend` at runtime (benchmarks and parity tests do this).
"""

import logging
import os

import numpy as np

from . import _kernels_py

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_impl = _kernels_py
BACKEND = "python"


def available_backends():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def set_backend(name):
    """Switch kernels to ``"compiled"`` or ``"python"``; returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        _impl = _compiled
    elif name == "python":
        _impl = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'compiled' or 'python'")
    BACKEND = name
    return previous


def scatter_add_rows(out, ids, src):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    if src.ndim == 1:
        src = src[:, None]
        view = out.reshape(-1, 1)
    else:
        view = out
    _impl.scatter_add_rows(view, ids, src)


def interp_gather(z, p):
    return _impl.interp_gather(
        np.ascontiguousarray(z, dtype=np.float64), np.ascontiguousarray(p, dtype=np.float64)
    )


def interp_scatter(z, p, gout):
    return _impl.interp_scatter(
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(p, dtype=np.float64),
        np.ascontiguousarray(gout, dtype=np.float64),
    )


_requested = os.environ.get("CAPEREC_BACKEND", "").strip().lower()
if _requested == "python" or _compiled is None:
    if _requested == "compiled":
        logger.warning("CAPEREC_BACKEND=compiled but the extension is missing; using python")
else:
    set_backend("compiled")
