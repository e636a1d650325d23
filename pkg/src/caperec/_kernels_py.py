"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable or when the
backend is forced to ``"python"``. Results are bitwise identical to the
compiled versions: both accumulate in the same order and neither contracts
multiply-adds.
"""

import numpy as np


def scatter_add_rows(out, ids, src):
    """``out[ids[i]] += src[i]`` for every i, in index order."""
    np.add.at(out, ids, src)


def _split(p, width):
    # nan maps to 0 so the lookup stays in bounds; the weight keeps the nan
    lo = np.floor(np.where(np.isnan(p), 0.0, p)).astype(np.int64)
    hi = np.minimum(lo + 1, width - 1)
    w = p - lo
    return lo, hi, w


def interp_gather(z, p):
    """Linear interpolation of each row of ``z`` at fractional indices ``p``.

    z: (R, P) table of logits, p: (R, n) positions already clamped to [0, P-1].
    """
    lo, hi, w = _split(p, z.shape[1])
    z_lo = np.take_along_axis(z, lo, axis=1)
    z_hi = np.take_along_axis(z, hi, axis=1)
    return w * z_hi + (1.0 - w) * z_lo


def interp_scatter(z, p, gout):
    """Backward of :func:`interp_gather`; returns ``(grad_z, grad_p)``."""
    rows, width = z.shape
    lo, hi, w = _split(p, width)
    z_lo = np.take_along_axis(z, lo, axis=1)
    z_hi = np.take_along_axis(z, hi, axis=1)
    gp = (z_hi - z_lo) * gout

    offset = (np.arange(rows, dtype=np.int64) * width)[:, None]
    gz = np.zeros(rows * width)
    np.add.at(gz, (lo + offset).ravel(), ((1.0 - w) * gout).ravel())
    np.add.at(gz, (hi + offset).ravel(), (w * gout).ravel())
    return gz.reshape(rows, width), gp
