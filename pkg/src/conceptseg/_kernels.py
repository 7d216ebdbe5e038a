"""Matrix-product kernels with loop-order-exact accumulation.

Both the numba and the plain-numpy paths accumulate every output entry in
the same order as the textbook triple loop (sequential over the inner
dimension, starting from 0.0), so results are bit-identical to a naive
reference product. BLAS is deliberately not used: its blocked/FMA sums
reorder the accumulation.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _mm2_py(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for kk in range(k):
        out += a[:, kk : kk + 1] * b[kk : kk + 1, :]
    return out


def _mm3_py(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    g, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((g, m, n))
    for kk in range(k):
        out += a[:, :, kk : kk + 1] * b[:, kk : kk + 1, :]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _mm2_nb(a: np.ndarray, b: np.ndarray) -> np.ndarray:  # pragma: no cover - jit
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for kk in range(k):
                aik = a[i, kk]
                for j in range(n):
                    out[i, j] += aik * b[kk, j]
        return out

    @njit(cache=True)
    def _mm3_nb(a: np.ndarray, b: np.ndarray) -> np.ndarray:  # pragma: no cover - jit
        g, m, k = a.shape
        n = b.shape[2]
        out = np.zeros((g, m, n))
        for gg in range(g):
            for i in range(m):
                for kk in range(k):
                    aik = a[gg, i, kk]
                    for j in range(n):
                        out[gg, i, j] += aik * b[gg, kk, j]
        return out

    mm2 = _mm2_nb
    mm3 = _mm3_nb
else:  # pragma: no cover
    mm2 = _mm2_py
    mm3 = _mm3_py


def matmul_exact(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two stacked or plain matrices, naive accumulation order.

    Supports (m,k)@(k,n), (...,m,k)@(k,n) and (...,m,k)@(...,k,n) with equal
    leading dims. Inputs are made contiguous float64.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 2 and b.ndim == 2:
        return mm2(a, b)
    if a.ndim > 2 and b.ndim == 2:
        lead = a.shape[:-2]
        flat = mm2(a.reshape(-1, a.shape[-1]), b)
        return flat.reshape(*lead, a.shape[-2], b.shape[-1])
    if a.ndim > 2 and b.ndim == a.ndim:
        lead = a.shape[:-2]
        a3 = a.reshape(-1, a.shape[-2], a.shape[-1])
        b3 = b.reshape(-1, b.shape[-2], b.shape[-1])
        out = mm3(a3, b3)
        return out.reshape(*lead, a.shape[-2], b.shape[-1])
    raise ValueError(f"unsupported matmul arity: {a.shape} @ {b.shape}")
