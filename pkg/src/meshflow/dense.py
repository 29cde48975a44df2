"""Closed-form determinants and inverses for stacks of small matrices.

All routines take arrays of shape ``(..., d, d)`` with ``d`` in {1, 2, 3}
and fall back to LAPACK for anything larger.
"""

import numpy as np


def det(a):
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if d == 1:
        return a[..., 0, 0].copy()
    if d == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    if d == 3:
        return (
            a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
        )
    return np.linalg.det(a)


def inv(a, adet=None):
    """Inverse of a stack of matrices; ``adet`` may be passed to avoid recomputation."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if d > 3:
        return np.linalg.inv(a)
    if adet is None:
        adet = det(a)
    out = np.empty_like(a)
    if d == 1:
        out[..., 0, 0] = 1.0
    elif d == 2:
        out[..., 0, 0] = a[..., 1, 1]
        out[..., 1, 1] = a[..., 0, 0]
        out[..., 0, 1] = -a[..., 0, 1]
        out[..., 1, 0] = -a[..., 1, 0]
    else:
        # adjugate, row by row
        out[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
        out[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
        out[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
        out[..., 1, 0] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
        out[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
        out[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
        out[..., 2, 0] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
        out[..., 2, 1] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
        out[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return out / np.asarray(adet)[..., None, None]


def trace(a):
    return np.trace(a, axis1=-2, axis2=-1)


def transpose(a):
    return np.swapaxes(a, -1, -2)


def is_spd(m, rtol=1e-12):
    """True where every matrix in the stack is symmetric and positive definite."""
    m = np.asarray(m, dtype=float)
    scale = np.abs(m).max(axis=(-2, -1))
    sym = np.abs(m - transpose(m)).max(axis=(-2, -1)) <= rtol * np.maximum(scale, 1e-300)
    lam = np.linalg.eigvalsh(0.5 * (m + transpose(m)))
    return sym & (lam[..., 0] > 0)
