"""Hot numeric kernels with numba-jitted and pure-numpy variants.

The active variant is chosen at import time: set DISTGRAD_NO_NUMBA=1 to force
the pure-numpy path (or when numba is unavailable). Both variants are always
importable so benchmarks can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

USE_NUMBA = os.environ.get("DISTGRAD_NO_NUMBA", "0") not in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None
    USE_NUMBA = False


# -- CSR sparse matrix-vector product -----------------------------------


def csr_spmv_numpy(indptr, indices, values, x, out):
    for i in range(len(indptr) - 1):
        lo, hi = indptr[i], indptr[i + 1]
        out[i] = values[lo:hi] @ x[indices[lo:hi]]
    return out


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def csr_spmv_numba(indptr, indices, values, x, out):
        for i in range(len(indptr) - 1):
            acc = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                acc += values[k] * x[indices[k]]
            out[i] = acc
        return out

else:  # pragma: no cover
    csr_spmv_numba = csr_spmv_numpy


def csr_spmv(indptr, indices, values, x, out=None):
    if out is None:
        out = np.empty(len(indptr) - 1)
    if USE_NUMBA:
        return csr_spmv_numba(indptr, indices, values, x, out)
    return csr_spmv_numpy(indptr, indices, values, x, out)


# -- variable-coefficient 5-point wave stencil --------------------------
#
# Fields carry a one-cell ghost frame; interior cell (i, j) of the output is
#   2*uc - up + r * sum_faces c_face * (u_nbr - uc)
# with c_face the mean of the two adjacent squared-velocity cells and
# r = dt^2 / h^2. Output ghosts are zeroed.


def wave_step_numpy(up, uc, csq, r, out):
    out[:] = 0.0
    C = uc[1:-1, 1:-1]
    cc = csq[1:-1, 1:-1]
    acc = 2.0 * C - up[1:-1, 1:-1]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = uc[1 + di : uc.shape[0] - 1 + di, 1 + dj : uc.shape[1] - 1 + dj]
        cn = csq[1 + di : csq.shape[0] - 1 + di, 1 + dj : csq.shape[1] - 1 + dj]
        acc = acc + r * 0.5 * (cc + cn) * (nb - C)
    out[1:-1, 1:-1] = acc
    return out


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def wave_step_numba(up, uc, csq, r, out):
        n0, n1 = uc.shape
        for i in range(n0):
            for j in range(n1):
                out[i, j] = 0.0
        for i in range(1, n0 - 1):
            for j in range(1, n1 - 1):
                c = csq[i, j]
                lap = (
                    0.5 * (c + csq[i + 1, j]) * (uc[i + 1, j] - uc[i, j])
                    + 0.5 * (c + csq[i - 1, j]) * (uc[i - 1, j] - uc[i, j])
                    + 0.5 * (c + csq[i, j + 1]) * (uc[i, j + 1] - uc[i, j])
                    + 0.5 * (c + csq[i, j - 1]) * (uc[i, j - 1] - uc[i, j])
                )
                out[i, j] = 2.0 * uc[i, j] - up[i, j] + r * lap
        return out

else:  # pragma: no cover
    wave_step_numba = wave_step_numpy


def wave_step(up, uc, csq, r, out=None):
    if out is None:
        out = np.empty_like(uc)
    if USE_NUMBA:
        return wave_step_numba(up, uc, csq, r, out)
    return wave_step_numpy(up, uc, csq, r, out)


def warmup():
    """Trigger jit compilation once so rank threads never pay for it."""
    if not USE_NUMBA:
        return
    indptr = np.array([0, 1], dtype=np.int64)
    indices = np.array([0], dtype=np.int64)
    vals = np.ones(1)
    csr_spmv_numba(indptr, indices, vals, np.ones(1), np.empty(1))
    z = np.zeros((3, 3))
    wave_step_numba(z, z, z + 1.0, 0.1, np.empty((3, 3)))
