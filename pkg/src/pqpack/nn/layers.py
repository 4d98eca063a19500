"""Layer primitives: specs, parameters, and forward/backward rules.

Data layout is NCHW for spatial tensors and (batch, features) for dense
ones.  Convolutions run through im2col plus the shared matmul kernels, so
the forward pass inherits the pinned float64-accumulation contract from
``pqpack._kernels``.
"""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .. import _kernels as kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeMismatchError(ValueError):
    pass


class LayerKind(IntEnum):
    CONV3X3 = 1
    CONV1X1 = 2
    FULLY_CONNECTED = 3
    BATCH_NORM = 4
    RELU = 5
    MAX_POOL = 6
    AVG_POOL = 7
    FLATTEN = 8
    SOFTMAX_CLASSIFIER = 9


PARAMETERIZED_KINDS = frozenset(
    {
        LayerKind.CONV3X3,
        LayerKind.CONV1X1,
        LayerKind.FULLY_CONNECTED,
        LayerKind.BATCH_NORM,
    }
)

#: kinds whose weights are eligible for codebook encoding
CODABLE_KINDS = frozenset(
    {LayerKind.CONV3X3, LayerKind.CONV1X1, LayerKind.FULLY_CONNECTED}
)


@dataclass
class LayerSpec:
    kind: LayerKind
    layer_index: int
    in_channels: int = 0
    out_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    stride: int = 1
    padding: int = 0
    pool_size: int = 2

    @property
    def kernel_size(self) -> int:
        if self.kind == LayerKind.CONV3X3:
            return 3
        if self.kind == LayerKind.CONV1X1:
            return 1
        raise ValueError(f"layer kind {self.kind.name} has no kernel")

    def weight_shape(self):
        if self.kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
            k = self.kernel_size
            return (self.out_channels, self.in_channels, k, k)
        if self.kind == LayerKind.FULLY_CONNECTED:
            return (self.out_features, self.in_features)
        if self.kind == LayerKind.BATCH_NORM:
            return (self.in_channels,)
        return None

    def describe(self) -> str:
        return f"layer {self.layer_index} ({self.kind.name})"


@dataclass
class LayerParams:
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def named_arrays(self):
        for name in ("weight", "bias", "running_mean", "running_var"):
            arr = getattr(self, name)
            if arr is not None:
                yield name, arr

    def copy(self) -> "LayerParams":
        return LayerParams(
            *(None if a is None else a.copy()
              for a in (self.weight, self.bias,
                        self.running_mean, self.running_var))
        )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unroll sliding windows into rows; column order is (channel, ky, kx)."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatchError(
            f"window {kh}x{kw} stride {stride} pad {padding} does not fit "
            f"input {h}x{w}"
        )
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def col2im(dcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + stride * ho:stride,
                kx:kx + stride * wo:stride] += d6[:, :, ky, kx]
    if padding:
        return dxp[:, :, padding:h + padding, padding:w + padding]
    return dxp


def _require(cond, spec, msg):
    if not cond:
        raise ShapeMismatchError(f"{spec.describe()}: {msg}")


def conv_forward(spec: LayerSpec, p: LayerParams, x: np.ndarray):
    _require(x.ndim == 4, spec, f"expected NCHW input, got shape {x.shape}")
    _require(
        x.shape[1] == spec.in_channels,
        spec,
        f"expected {spec.in_channels} input channels, got {x.shape[1]}",
    )
    co, ci, kh, kw = p.weight.shape
    cols, ho, wo = im2col(x, kh, kw, spec.stride, spec.padding)
    wmat = np.ascontiguousarray(p.weight.reshape(co, ci * kh * kw).T)
    out = kernels.fc_forward(cols, wmat)
    out = np.ascontiguousarray(
        out.reshape(x.shape[0], ho, wo, co).transpose(0, 3, 1, 2)
    )
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out, (x.shape, cols, ho, wo)


def conv_backward(spec: LayerSpec, p: LayerParams, gout, cache):
    x_shape, cols, ho, wo = cache
    n = x_shape[0]
    co, ci, kh, kw = p.weight.shape
    g = np.ascontiguousarray(gout.transpose(0, 2, 3, 1).reshape(n * ho * wo, co))
    dwmat = kernels.fc_grad_weights(cols, g)
    dweight = np.ascontiguousarray(dwmat.T).reshape(p.weight.shape)
    wmat = np.ascontiguousarray(p.weight.reshape(co, ci * kh * kw).T)
    dcols = kernels.fc_grad_input(g, wmat)
    dx = col2im(dcols, x_shape, kh, kw, spec.stride, spec.padding, ho, wo)
    dbias = g.sum(axis=0) if p.bias is not None else None
    return dx, dweight, dbias


def fc_forward(spec: LayerSpec, p: LayerParams, x: np.ndarray):
    _require(x.ndim == 2, spec, f"expected (batch, features), got shape {x.shape}")
    _require(
        x.shape[1] == spec.in_features,
        spec,
        f"expected {spec.in_features} input features, got {x.shape[1]}",
    )
    wmat = np.ascontiguousarray(p.weight.T)
    out = kernels.fc_forward(x, wmat)
    if p.bias is not None:
        out += p.bias
    return out, x


def fc_backward(spec: LayerSpec, p: LayerParams, gout, cache):
    x = cache
    dweight = np.ascontiguousarray(kernels.fc_grad_weights(x, gout).T)
    dx = kernels.fc_grad_input(gout, np.ascontiguousarray(p.weight.T))
    dbias = gout.sum(axis=0) if p.bias is not None else None
    return dx, dweight, dbias


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeMismatchError(f"batch norm expects 2-D or 4-D input, got {x.ndim}-D")


def bn_forward(spec: LayerSpec, p: LayerParams, x, *, static: bool):
    axes, shape = _bn_axes(x)
    _require(
        x.shape[1] == spec.in_channels,
        spec,
        f"expected {spec.in_channels} channels, got {x.shape[1]}",
    )
    if static:
        mu, var = p.running_mean, p.running_var
    else:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        p.running_mean = ((1 - BN_MOMENTUM) * p.running_mean + BN_MOMENTUM * mu)
        p.running_var = ((1 - BN_MOMENTUM) * p.running_var + BN_MOMENTUM * var)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    out = p.weight.reshape(shape) * xhat + p.bias.reshape(shape)
    return out, (xhat, inv, static)


def bn_backward(spec: LayerSpec, p: LayerParams, gout, cache):
    xhat, inv, static = cache
    axes, shape = _bn_axes(gout)
    dgamma = (gout * xhat).sum(axis=axes)
    dbeta = gout.sum(axis=axes)
    if static:
        dx = gout * (p.weight * inv).reshape(shape)
    else:
        m = gout.size // p.weight.size
        dx = (p.weight * inv).reshape(shape) / m * (
            m * gout - dbeta.reshape(shape) - xhat * dgamma.reshape(shape)
        )
    return dx, dgamma, dbeta


def relu_forward(spec, x):
    return np.maximum(x, 0), x > 0


def relu_backward(gout, mask):
    return gout * mask


def _pool_windows(x, k, spec):
    n, c, h, w = x.shape
    _require(h % k == 0 and w % k == 0, spec,
             f"input {h}x{w} not divisible by pool size {k}")
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, ho, wo, k * k), (n, c, ho, wo)


def maxpool_forward(spec: LayerSpec, x):
    _require(x.ndim == 4, spec, f"expected NCHW input, got shape {x.shape}")
    k = spec.pool_size
    win, _ = _pool_windows(x, k, spec)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, k)


def maxpool_backward(gout, cache):
    idx, x_shape, k = cache
    n, c, h, w = x_shape
    ho, wo = h // k, w // k
    dwin = np.zeros((n, c, ho, wo, k * k), dtype=gout.dtype)
    np.put_along_axis(dwin, idx[..., None], gout[..., None], axis=-1)
    return (
        dwin.reshape(n, c, ho, wo, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def avgpool_forward(spec: LayerSpec, x):
    _require(x.ndim == 4, spec, f"expected NCHW input, got shape {x.shape}")
    k = spec.pool_size
    win, (n, c, ho, wo) = _pool_windows(x, k, spec)
    # fixed-order accumulation keeps the result independent of numpy's
    # reduction strategy
    acc = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(k * k):
        acc += win[..., i]
    out = (acc / (k * k)).astype(x.dtype)
    return out, (x.shape, k)


def avgpool_backward(gout, cache):
    x_shape, k = cache
    n, c, h, w = x_shape
    ho, wo = h // k, w // k
    g = (gout / (k * k))[..., None]
    dwin = np.broadcast_to(g, (n, c, ho, wo, k * k))
    return (
        dwin.reshape(n, c, ho, wo, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
        .astype(gout.dtype)
    )


def flatten_forward(spec, x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(gout, shape):
    return gout.reshape(shape)
