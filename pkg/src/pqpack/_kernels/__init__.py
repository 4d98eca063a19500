"""Hot-kernel backend selection.

The forward matmul and the k-means assignment carry a pinned numeric
contract (float64 accumulation in ascending order of the contracted
axis, single final cast) so results are bit-identical across backends;
the compiled Cython core makes them fast, the pure-numpy fallback
emulates the ordering with a vectorized loop over the contracted axis.
``PQPACK_BACKEND`` overrides the choice: ``compiled`` (fail loudly if
unavailable), ``python``, or ``auto`` (default).

The backward kernels have no ordering contract, so both backends use the
same BLAS-backed implementations.
"""

import os

import numpy as np

from . import fallback as _fallback

_requested = os.environ.get("PQPACK_BACKEND", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(
        f"PQPACK_BACKEND must be auto, compiled, or python, got {_requested!r}"
    )

if _requested == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _fallback
        BACKEND = "python"

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_matrix(a, name):
    a = np.ascontiguousarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float32)
    return a


def _pair(a, b, na, nb):
    a = _as_matrix(a, na)
    b = _as_matrix(b, nb)
    if a.dtype != b.dtype:
        common = np.promote_types(a.dtype, b.dtype)
        a = a.astype(common, copy=False)
        b = b.astype(common, copy=False)
    return a, b


def fc_forward(x, w):
    x, w = _pair(x, w, "x", "w")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"inner dims differ: x {x.shape} vs w {w.shape}")
    return _impl.fc_forward(x, w)


def fc_grad_input(gout, w):
    gout, w = _pair(gout, w, "gout", "w")
    return _fallback.fc_grad_input(gout, w)


def fc_grad_weights(x, gout):
    x, gout = _pair(x, gout, "x", "gout")
    return _fallback.fc_grad_weights(x, gout)


def kmeans_assign(points, centroids):
    points, centroids = _pair(points, centroids, "points", "centroids")
    if points.shape[1] != centroids.shape[1]:
        raise ValueError(
            f"dim mismatch: points {points.shape} vs centroids {centroids.shape}"
        )
    return _impl.kmeans_assign(points, centroids)
