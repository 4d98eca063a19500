"""Budgeted inference runtime.

Models are rebuilt from the bundle (the modeled read-only flash side)
into a fixed-capacity arena (the modeled SRAM side): compressed layers
look up float16 codewords, widen to float32, and convert to int8 with the
stored quantization parameters; escape layers copy their int8 bytes
directly.  Inference runs the topologically ordered op list in int8 with
int32 accumulation, requantizing between layers with integer
multiply-plus-shift; floats appear only at the input/output boundary.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import Bundle, EncodedModel, deployment_weight
from .nn import LayerKind
from .nn.layers import BN_EPS, im2col
from .nn.model import trace_shapes
from .quant import QuantParams, dequantize, quantize, quantize_to_int32

I32 = np.int32
I64 = np.int64


class ArenaError(RuntimeError):
    pass


class CapacityError(ArenaError):
    pass


class StaleResidentError(ArenaError):
    pass


@dataclass
class LoadStats:
    bytes_read: int
    bytes_written: int


# ----------------------------------------------------------------------
# fixed-point requantization


def quantize_multiplier(m: float) -> tuple[int, int]:
    """Decompose m as m0 * 2^shift with m0 a Q31 fixed-point value in
    [0.5, 1) (sign carried by m0)."""
    if m == 0.0:
        return 0, 0
    mant, shift = math.frexp(m)
    m0 = int(round(mant * (1 << 31)))
    if abs(m0) == 1 << 31:
        m0 //= 2
        shift += 1
    return m0, shift


def _srdhm(a: np.ndarray, m0) -> np.ndarray:
    """Saturating rounding doubling high multiply (gemmlowp semantics:
    truncating division, not an arithmetic shift)."""
    ab = a.astype(I64) * np.asarray(m0, dtype=I64)
    nudge = np.where(ab >= 0, I64(1 << 30), I64(1 - (1 << 30)))
    q = ab + nudge
    res = np.where(q >= 0, q >> 31, -((-q) >> 31))
    return np.clip(res, -(1 << 31), (1 << 31) - 1).astype(I32)


def _rounding_divide_pot(x: np.ndarray, exponent) -> np.ndarray:
    """Arithmetic right shift with round-to-nearest, halves away from
    zero; exponent may be a per-channel array."""
    e = np.asarray(exponent, dtype=I32)
    mask = ((I64(1) << e.astype(I64)) - 1).astype(I64)
    x64 = x.astype(I64)
    remainder = x64 & mask
    threshold = (mask >> 1) + (x64 < 0)
    return ((x64 >> e.astype(I64)) + (remainder > threshold)).astype(I32)


def multiply_by_multiplier(x: np.ndarray, m0, shift) -> np.ndarray:
    """x * (m0 * 2^shift / 2^31) with TFLM-style rounding."""
    shift = np.asarray(shift, dtype=I32)
    left = np.maximum(shift, 0)
    right = np.maximum(-shift, 0)
    scaled = np.clip(x.astype(I64) << left.astype(I64),
                     -(1 << 31), (1 << 31) - 1).astype(I32)
    return _rounding_divide_pot(_srdhm(scaled, m0), right)


def requantize(acc: np.ndarray, m0, shift, z_out) -> np.ndarray:
    q = multiply_by_multiplier(acc, m0, shift) + np.asarray(z_out, dtype=I32)
    return np.clip(q, -128, 127).astype(np.int8)


def _rounding_divide(x: np.ndarray, divisor: int) -> np.ndarray:
    """Round-to-nearest integer division, halves away from zero."""
    x64 = x.astype(I64)
    d = I64(divisor)
    pos = (2 * x64 + d) // (2 * d)
    neg = -((-2 * x64 + d) // (2 * d))
    return np.where(x64 >= 0, pos, neg).astype(I32)


# ----------------------------------------------------------------------
# arena


class Arena:
    """Fixed-capacity byte region; all resident model state lives in it.

    Allocation never exceeds capacity (CapacityError, nothing written);
    ``high_water`` tracks the peak offset ever reached.
    """

    def __init__(self, capacity: int = 512 * 1024):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.buf = np.zeros(capacity, dtype=np.uint8)
        self.high_water = 0
        self.resident: str | None = None
        self.generation = 0
        self._offset = 0

    def begin_load(self) -> None:
        """Invalidate the resident model and reuse the region from the
        start; a failed load leaves the arena empty but valid."""
        self.resident = None
        self.generation += 1
        self._offset = 0

    def alloc(self, nbytes: int, dtype, shape) -> np.ndarray:
        align = np.dtype(dtype).alignment
        start = self._offset + (-self._offset) % align
        end = start + nbytes
        if end > self.capacity:
            raise CapacityError(
                f"arena exhausted: need {end} bytes, capacity {self.capacity}"
            )
        self._offset = end
        self.high_water = max(self.high_water, end)
        return self.buf[start:end].view(dtype).reshape(shape)

    def alloc_like(self, count: int, dtype) -> np.ndarray:
        return self.alloc(count * np.dtype(dtype).itemsize, dtype, (count,))

    @property
    def used_bytes(self) -> int:
        return self._offset


# ----------------------------------------------------------------------
# execution plan


@dataclass
class _Op:
    kind: LayerKind
    layer_index: int
    in_shape: tuple
    out_shape: tuple
    in_qp: QuantParams | None = None
    out_qp: QuantParams | None = None
    weight: np.ndarray | None = None  # int8 arena view
    weight_qp: QuantParams | None = None
    bias: np.ndarray | None = None  # int32 arena view
    m0: int = 0
    shift: int = 0
    bn_m0: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    bn_zbias: np.ndarray | None = None
    spec_stride: int = 1
    spec_padding: int = 0
    pool_size: int = 2
    relu_floor: int | None = None


@dataclass
class ResidentModel:
    name: str
    num_classes: int
    input_shape: tuple
    input_qp: QuantParams
    output_qp: QuantParams
    plan: list[_Op]
    weights: dict[int, np.ndarray]
    ping: np.ndarray
    pong: np.ndarray
    generation: int = 0
    arena: Arena | None = field(default=None, repr=False)

    def weight_view(self, layer_index: int) -> np.ndarray:
        return self.weights[layer_index]


def _effective_out_qp(em: EncodedModel, i: int) -> QuantParams:
    """Output params for op i, looking through a directly following ReLU
    so the activation fuses into the requantization clamp."""
    j = i
    if j + 1 < len(em.layers) and em.layers[j + 1].kind == LayerKind.RELU:
        j += 1
    return em.act_qps[j]


def load_model(bundle: Bundle, model_name: str, arena: Arena):
    """Rebuild one bundled model into the arena.

    Returns (ResidentModel, LoadStats).  On any failure the arena is left
    empty; a capacity check runs before anything is written.
    """
    em = bundle.parse_model(model_name)
    bytes_read = (
        24 + bundle.toc_bytes + bundle.model_span(model_name)[1]
        + bundle.codeword_bytes_touched(em)
    )
    shapes = trace_shapes(em.layers, em.input_shape)
    arena.begin_load()

    plan: list[_Op] = []
    weights: dict[int, np.ndarray] = {}
    fills: list[tuple[np.ndarray, np.ndarray]] = []
    bytes_written = 0
    cur_qp = em.input_qp
    prev_shape = tuple(em.input_shape)
    fused_relu_after: int | None = None

    for i, spec in enumerate(em.layers):
        idx = spec.layer_index
        out_shape = shapes[i]
        op = _Op(kind=spec.kind, layer_index=idx, in_shape=prev_shape,
                 out_shape=out_shape, spec_stride=spec.stride,
                 spec_padding=spec.padding, pool_size=spec.pool_size)
        if spec.kind in (LayerKind.CONV3X3, LayerKind.CONV1X1,
                         LayerKind.FULLY_CONNECTED):
            if idx in em.codes:
                wq_params = em.weight_qparams[idx]
                w_f32 = deployment_weight(em.codes[idx], bundle.pair,
                                          spec.weight_shape())
                w_int8 = quantize(w_f32, wq_params)
            else:
                flat, wq_params = em.escapes[idx]
                w_int8 = flat.reshape(spec.weight_shape())
            if spec.kind == LayerKind.FULLY_CONNECTED:
                mat = w_int8  # (out, in)
            else:
                co = spec.out_channels
                mat = w_int8.reshape(co, -1)
            view = arena.alloc(mat.size, np.int8, mat.shape)
            fills.append((view, mat.astype(np.int8)))
            bytes_written += mat.size
            weights[idx] = view
            op.weight = view
            out_qp = _effective_out_qp(em, i)
            in_scale = float(np.float32(cur_qp.scale))
            w_scale = float(np.float32(wq_params.scale))
            op.m0, op.shift = quantize_multiplier(
                in_scale * w_scale / float(np.float32(out_qp.scale))
            )
            op.in_qp = cur_qp
            op.out_qp = out_qp
            bias_f32 = em.biases.get(idx)
            if bias_f32 is not None:
                b_i32 = quantize_to_int32(bias_f32, in_scale * w_scale)
                bview = arena.alloc(b_i32.size * 4, np.int32, b_i32.shape)
                fills.append((bview, b_i32))
                bytes_written += b_i32.size * 4
                op.bias = bview
            op.weight_qp = wq_params
            cur_qp = out_qp
            fused_relu_after = i + 1 if _was_fused(em, i) else None
        elif spec.kind == LayerKind.BATCH_NORM:
            s = em.bn[idx]
            a = s.gamma.astype(np.float64) / np.sqrt(
                s.var.astype(np.float64) + BN_EPS
            )
            d = s.beta.astype(np.float64) - a * s.mean.astype(np.float64)
            out_qp = _effective_out_qp(em, i)
            in_scale = float(np.float32(cur_qp.scale))
            out_scale = float(np.float32(out_qp.scale))
            m0s = np.empty(a.size, dtype=I32)
            shifts = np.empty(a.size, dtype=I32)
            for c, val in enumerate(a * in_scale / out_scale):
                m0s[c], shifts[c] = quantize_multiplier(float(val))
            zbias = (
                np.round(d / out_scale).astype(I64) + out_qp.zero_point
            ).astype(I32)
            mv = arena.alloc(m0s.size * 4, np.int32, m0s.shape)
            sv = arena.alloc(shifts.size * 4, np.int32, shifts.shape)
            zv = arena.alloc(zbias.size * 4, np.int32, zbias.shape)
            fills.extend([(mv, m0s), (sv, shifts), (zv, zbias)])
            bytes_written += 12 * m0s.size
            op.bn_m0, op.bn_shift, op.bn_zbias = mv, sv, zv
            op.in_qp = cur_qp
            op.out_qp = out_qp
            cur_qp = out_qp
            fused_relu_after = i + 1 if _was_fused(em, i) else None
        elif spec.kind == LayerKind.RELU:
            if fused_relu_after == i:
                op.relu_floor = None  # already folded into requantization
            else:
                op.relu_floor = cur_qp.zero_point
            fused_relu_after = None
        # pools, flatten, classifier: carry current params through
        op.in_qp = op.in_qp or cur_qp
        op.out_qp = op.out_qp or cur_qp
        plan.append(op)
        prev_shape = out_shape

    max_elems = max(
        [int(np.prod(em.input_shape))] + [int(np.prod(s)) for s in shapes]
    )
    ping = arena.alloc_like(max_elems, np.int8)
    pong = arena.alloc_like(max_elems, np.int8)
    # int32 accumulator scratch for the widest op output
    arena.alloc_like(max_elems, np.int32)

    for view, data in fills:
        np.copyto(view, data)

    resident = ResidentModel(
        name=model_name,
        num_classes=em.num_classes,
        input_shape=tuple(em.input_shape),
        input_qp=em.input_qp,
        output_qp=cur_qp,
        plan=plan,
        weights=weights,
        ping=ping,
        pong=pong,
        generation=arena.generation,
        arena=arena,
    )
    arena.resident = model_name
    return resident, LoadStats(bytes_read=bytes_read, bytes_written=bytes_written)


def _was_fused(em: EncodedModel, i: int) -> bool:
    return i + 1 < len(em.layers) and em.layers[i + 1].kind == LayerKind.RELU


def swap_model(bundle: Bundle, new_model_name: str, arena: Arena):
    """Replace whatever is resident with another bundled model, reusing
    the same region (no double residency)."""
    resident, _ = load_model(bundle, new_model_name, arena)
    return resident


# ----------------------------------------------------------------------
# int8 inference


def infer(resident: ResidentModel, batch: np.ndarray) -> np.ndarray:
    """Execute the int8 plan over a batch; returns float32 class scores.

    All reads hit the arena; the bundle is never touched.  Outputs are
    bitwise deterministic.
    """
    if resident.arena is not None and (
        resident.arena.generation != resident.generation
        or resident.arena.resident != resident.name
    ):
        raise StaleResidentError(
            f"model {resident.name} is no longer resident in its arena"
        )
    x = np.asarray(batch, dtype=np.float32)
    single = x.shape == tuple(resident.input_shape)
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(resident.input_shape):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match model input "
            f"{resident.input_shape}"
        )
    out_elems = int(np.prod(resident.plan[-1].out_shape))
    out = np.empty((x.shape[0], out_elems), dtype=np.float32)
    for n in range(x.shape[0]):
        out[n] = _infer_one(resident, x[n])
    return out[0] if single else out


def _infer_one(resident: ResidentModel, sample: np.ndarray) -> np.ndarray:
    count = int(np.prod(resident.input_shape))
    buf = resident.ping[:count]
    np.copyto(buf, quantize(sample, resident.input_qp).reshape(-1))
    cur = buf.reshape(resident.input_shape)
    use_pong = True
    for op in resident.plan:
        nxt_buf = (resident.pong if use_pong else resident.ping)
        if op.kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
            q = _conv_int8(op, cur)
        elif op.kind == LayerKind.FULLY_CONNECTED:
            q = _fc_int8(op, cur)
        elif op.kind == LayerKind.BATCH_NORM:
            q = _bn_int8(op, cur)
        elif op.kind == LayerKind.RELU:
            q = cur if op.relu_floor is None else np.maximum(cur, op.relu_floor)
        elif op.kind == LayerKind.MAX_POOL:
            q = _maxpool_int8(cur, op.pool_size)
        elif op.kind == LayerKind.AVG_POOL:
            q = _avgpool_int8(cur, op.pool_size)
        elif op.kind == LayerKind.FLATTEN:
            q = cur.reshape(-1)
        else:  # SOFTMAX_CLASSIFIER marker: scores leave as-is
            q = cur
        elems = int(np.prod(op.out_shape))
        dst = nxt_buf[:elems]
        np.copyto(dst, np.asarray(q, dtype=np.int8).reshape(-1))
        cur = dst.reshape(op.out_shape)
        use_pong = not use_pong
    qp = resident.output_qp
    return dequantize(cur.reshape(-1), qp)


def _conv_int8(op: _Op, x: np.ndarray) -> np.ndarray:
    k = 3 if op.kind == LayerKind.CONV3X3 else 1
    # shift by the zero point before padding: padded cells must mean
    # real 0, which is q == Z, not integer 0
    shifted = x.astype(I32) - I32(op.in_qp.zero_point)
    cols, ho, wo = im2col(shifted[None], k, k, op.spec_stride,
                          op.spec_padding)
    acc = cols @ (
        op.weight.astype(I32).T - I32(op.weight_qp.zero_point)
    )
    if op.bias is not None:
        acc = acc + op.bias[None, :]
    q = requantize(acc, op.m0, op.shift, op.out_qp.zero_point)
    co = op.out_shape[0]
    return q.reshape(ho, wo, co).transpose(2, 0, 1)


def _fc_int8(op: _Op, x: np.ndarray) -> np.ndarray:
    acc = (x.astype(I32).reshape(1, -1) - I32(op.in_qp.zero_point)) @ (
        op.weight.astype(I32).T - I32(op.weight_qp.zero_point)
    )
    if op.bias is not None:
        acc = acc + op.bias[None, :]
    return requantize(acc, op.m0, op.shift, op.out_qp.zero_point).reshape(-1)


def _bn_int8(op: _Op, x: np.ndarray) -> np.ndarray:
    acc = x.astype(I32) - I32(op.in_qp.zero_point)
    if x.ndim == 3:
        m0 = op.bn_m0[:, None, None]
        shift = op.bn_shift[:, None, None]
        zb = op.bn_zbias[:, None, None]
    else:
        m0, shift, zb = op.bn_m0, op.bn_shift, op.bn_zbias
    q = multiply_by_multiplier(acc, m0, shift) + zb
    return np.clip(q, -128, 127).astype(np.int8)


def _pool_view(x: np.ndarray, k: int):
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).transpose(0, 1, 3, 2, 4).reshape(
        c, h // k, w // k, k * k
    )


def _maxpool_int8(x: np.ndarray, k: int) -> np.ndarray:
    return _pool_view(x, k).max(axis=-1)


def _avgpool_int8(x: np.ndarray, k: int) -> np.ndarray:
    s = _pool_view(x, k).astype(I32).sum(axis=-1)
    return np.clip(_rounding_divide(s, k * k), -128, 127).astype(np.int8)


# ----------------------------------------------------------------------
# float reference executor


def reference_model(em: EncodedModel, bundle_pair):
    """Float32 model using exactly the weights the int8 path sees
    (dequantized resident values); the oracle for int8 agreement."""
    from .bundle import float_deployment_model

    model = float_deployment_model(em, bundle_pair)
    for spec in em.layers:
        idx = spec.layer_index
        if idx in em.codes:
            w = deployment_weight(em.codes[idx], bundle_pair, spec.weight_shape())
            qp = em.weight_qparams[idx]
            model.params[idx].weight = dequantize(quantize(w, qp), qp).reshape(
                spec.weight_shape()
            )
    return model
