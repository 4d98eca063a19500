"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled extension is unavailable (see
``pqpack._kernels``).  ``fc_forward`` and ``kmeans_assign`` are bit-exact
with the compiled versions: both accumulate in float64, in ascending order
of the contracted axis, and cast once at the end.  The backward kernels
only promise backend-local determinism and use BLAS.
"""

import numpy as np


def fc_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """out[i, j] = sum_k x[i, k] * w[k, j], accumulated in float64 in
    ascending k order, then cast back to the input dtype."""
    n, k = x.shape
    j = w.shape[1]
    x64 = x.astype(np.float64, copy=False)
    w64 = w.astype(np.float64, copy=False)
    acc = np.zeros((n, j), dtype=np.float64)
    tmp = np.empty((n, j), dtype=np.float64)
    for kk in range(k):
        np.multiply(x64[:, kk : kk + 1], w64[kk], out=tmp)
        acc += tmp
    return acc.astype(x.dtype, copy=False)


def fc_grad_input(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """dx[i, k] = sum_j gout[i, j] * w[k, j] (order unpinned)."""
    return gout @ w.T


def fc_grad_weights(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    """dw[k, j] = sum_i x[i, k] * gout[i, j] (order unpinned)."""
    return x.T @ gout


def kmeans_assign(points: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per point under squared L2 distance.

    Distances accumulate in float64 in ascending dimension order; ties
    resolve to the lowest centroid index.  Returns ``(codes int32,
    squared distances float64)``.
    """
    n = points.shape[0]
    d = points.shape[1]
    p64 = points.astype(np.float64, copy=False)
    c64 = centroids.astype(np.float64, copy=False)
    d2 = np.zeros((n, centroids.shape[0]), dtype=np.float64)
    for dd in range(d):
        diff = p64[:, dd : dd + 1] - c64[:, dd]
        d2 += diff * diff
    codes = np.argmin(d2, axis=1).astype(np.int32)
    return codes, d2[np.arange(n), codes]
