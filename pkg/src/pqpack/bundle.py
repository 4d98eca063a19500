"""Deployment bundle: bit-exact serialization of one float16 codebook
pair plus N encoded models, with a byte-accounting table.

The layout is packed little-endian with explicit section offsets so a
runtime can seek straight to one model without scanning the others.  See
``docs/bundle_format.md`` for the byte-for-byte description; tests pin a
golden file against it.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import LayerKind, LayerParams, LayerSpec, ModelGraph
from .nn.model import num_classes as model_num_classes
from .pool import GroupId
from .pq import CodeMatrix
from .quant import F16CodebookPair, QuantParams, calibrate, dequantize, quantize

MAGIC = b"YNB1"
VERSION = 1

HEADER_FMT = "<4sHHIIII"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 24
GROUP_FMT = "<BBHH"
GROUP_HEADER_SIZE = struct.calcsize(GROUP_FMT)  # 6
LAYER_FMT = "<BBHIIHH"
LAYER_SIZE = struct.calcsize(LAYER_FMT)  # 16
QP_FMT = "<fb"
QP_SIZE = struct.calcsize(QP_FMT)  # 5

FLAG_HAS_BIAS = 1
FLAG_ESCAPE = 2
FLAG_COMPRESSED = 4

CALIBRATION_SAMPLES = 256


class BundleFormatError(ValueError):
    pass


@dataclass
class BNStats:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class EncodedModel:
    """Everything the runtime needs to rebuild and execute one model."""

    name: str
    layers: list[LayerSpec]
    input_shape: tuple
    num_classes: int
    original_param_bytes: int
    codes: dict[int, CodeMatrix] = field(default_factory=dict)
    weight_qparams: dict[int, QuantParams] = field(default_factory=dict)
    escapes: dict[int, tuple[np.ndarray, QuantParams]] = field(default_factory=dict)
    biases: dict[int, np.ndarray] = field(default_factory=dict)
    bn: dict[int, BNStats] = field(default_factory=dict)
    input_qp: QuantParams = QuantParams(1.0, 0)
    act_qps: list[QuantParams] = field(default_factory=list)

    def escape_layer_indices(self) -> list[int]:
        return sorted(self.escapes)


def code_width(k: int) -> int:
    return 1 if k <= 256 else 2


# ----------------------------------------------------------------------
# building an EncodedModel from optimizer output


def deployment_weight(codes: CodeMatrix, pair_f16: F16CodebookPair,
                      shape: tuple) -> np.ndarray:
    """Float32 weight as the runtime will see it: f16 codewords widened
    to f32, concatenated per row, unpooled to the original shape."""
    books = pair_f16.widened(codes.group)
    rows = np.concatenate(
        [books[m][codes.codes[:, m]] for m in range(len(books))], axis=1
    )
    count = int(np.prod(shape))
    return rows.reshape(-1)[:count].reshape(shape)


def float_deployment_model(em: EncodedModel, pair_f16: F16CodebookPair,
                           *, dequant_escapes: bool = True) -> ModelGraph:
    """Float reference of the bundled model: compressed layers from the
    f16 codebooks, escape layers from their stored int8 (or, with
    ``dequant_escapes=False``, left as-is in the caller's skeleton-free
    build), biases and BN stats as stored."""
    params: dict[int, LayerParams] = {}
    for spec in em.layers:
        idx = spec.layer_index
        if idx in em.codes:
            w = deployment_weight(em.codes[idx], pair_f16,
                                  spec.weight_shape())
            params[idx] = LayerParams(weight=w, bias=em.biases.get(idx))
        elif idx in em.escapes:
            q, qp = em.escapes[idx]
            w = dequantize(q, qp).reshape(spec.weight_shape())
            params[idx] = LayerParams(weight=w, bias=em.biases.get(idx))
        elif spec.kind == LayerKind.BATCH_NORM:
            s = em.bn[idx]
            params[idx] = LayerParams(
                weight=s.gamma.copy(), bias=s.beta.copy(),
                running_mean=s.mean.copy(), running_var=s.var.copy(),
            )
    model = ModelGraph(name=em.name, layers=list(em.layers), params=params,
                       bn_static=True)
    model.validate()
    return model


def build_encoded_model(
    optimized: ModelGraph,
    codes: dict[int, CodeMatrix],
    escape_layers: set | frozenset | list,
    pair_f16: F16CodebookPair,
    calib_x: np.ndarray,
    original_param_bytes: int | None = None,
) -> EncodedModel:
    """Package one optimized model for deployment.

    Escape layers store their finetuned weights as int8; the remaining
    codable layers keep only their code matrices (their rows are dropped
    from storage) plus the quantization parameters of the reconstructed
    weight.  Activation ranges come from a calibration pass over up to
    ``CALIBRATION_SAMPLES`` training samples.
    """
    escape_layers = set(escape_layers)
    em = EncodedModel(
        name=optimized.name,
        layers=list(optimized.layers),
        input_shape=tuple(calib_x.shape[1:]),
        num_classes=model_num_classes(optimized),
        original_param_bytes=(
            original_param_bytes
            if original_param_bytes is not None
            else optimized.param_bytes_f32()
        ),
    )
    calib_params: dict[int, LayerParams] = {}
    for spec in optimized.layers:
        idx = spec.layer_index
        p = optimized.params.get(spec.layer_index)
        if spec.kind == LayerKind.BATCH_NORM:
            em.bn[idx] = BNStats(
                gamma=p.weight.astype(np.float32),
                beta=p.bias.astype(np.float32),
                mean=p.running_mean.astype(np.float32),
                var=p.running_var.astype(np.float32),
            )
            calib_params[idx] = p.copy()
            continue
        if spec.kind not in (LayerKind.CONV3X3, LayerKind.CONV1X1,
                             LayerKind.FULLY_CONNECTED):
            continue
        if p.bias is not None:
            em.biases[idx] = p.bias.astype(np.float32)
        if idx in escape_layers:
            qp = calibrate(p.weight)
            em.escapes[idx] = (quantize(p.weight, qp).reshape(-1), qp)
            calib_params[idx] = LayerParams(weight=p.weight.copy(),
                                            bias=em.biases.get(idx))
        else:
            if idx not in codes:
                raise BundleFormatError(
                    f"model {optimized.name}: layer {idx} has neither codes "
                    "nor escape weights"
                )
            em.codes[idx] = codes[idx]
            w_dep = deployment_weight(codes[idx], pair_f16, spec.weight_shape())
            em.weight_qparams[idx] = calibrate(w_dep)
            calib_params[idx] = LayerParams(weight=w_dep,
                                            bias=em.biases.get(idx))
    calib_model = ModelGraph(name=em.name, layers=em.layers,
                             params=calib_params, bn_static=True)
    calib_model.validate()
    sample = calib_x[:CALIBRATION_SAMPLES].astype(np.float32)
    em.input_qp = calibrate(sample)
    _, captured = calib_model.forward(sample, capture=True)
    em.act_qps = [calibrate(out) for out in captured]
    return em


# ----------------------------------------------------------------------
# serialization


def _pack_qp(qp: QuantParams) -> bytes:
    return struct.pack(QP_FMT, np.float32(qp.scale), qp.zero_point)


def _layer_flags(em: EncodedModel, spec: LayerSpec) -> int:
    flags = 0
    idx = spec.layer_index
    if idx in em.biases:
        flags |= FLAG_HAS_BIAS
    if idx in em.escapes:
        flags |= FLAG_ESCAPE
    if idx in em.codes:
        flags |= FLAG_COMPRESSED
    return flags


def _spec_fields(spec: LayerSpec) -> tuple[int, int, int, int]:
    kind = spec.kind
    if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
        return spec.in_channels, spec.out_channels, spec.stride, spec.padding
    if kind == LayerKind.FULLY_CONNECTED:
        return spec.in_features, spec.out_features, 0, 0
    if kind == LayerKind.BATCH_NORM:
        return spec.in_channels, 0, 0, 0
    if kind in (LayerKind.MAX_POOL, LayerKind.AVG_POOL):
        return spec.pool_size, 0, 0, 0
    return 0, 0, 0, 0


def _spec_from_fields(kind, layer_index, p0, p1, p2, p3) -> LayerSpec:
    kind = LayerKind(kind)
    if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
        return LayerSpec(kind, layer_index, in_channels=p0, out_channels=p1,
                         stride=p2, padding=p3)
    if kind == LayerKind.FULLY_CONNECTED:
        return LayerSpec(kind, layer_index, in_features=p0, out_features=p1)
    if kind == LayerKind.BATCH_NORM:
        return LayerSpec(kind, layer_index, in_channels=p0)
    if kind in (LayerKind.MAX_POOL, LayerKind.AVG_POOL):
        return LayerSpec(kind, layer_index, pool_size=p0)
    return LayerSpec(kind, layer_index)


def _serialize_model(em: EncodedModel, k: int) -> bytes:
    parts = [struct.pack("<H", len(em.layers))]
    for spec in em.layers:
        p0, p1, p2, p3 = _spec_fields(spec)
        parts.append(struct.pack(LAYER_FMT, int(spec.kind),
                                 _layer_flags(em, spec), spec.layer_index,
                                 p0, p1, p2, p3))
    parts.append(struct.pack("<B", len(em.input_shape)))
    for dim in em.input_shape:
        parts.append(struct.pack("<I", dim))
    parts.append(struct.pack("<H", em.num_classes))
    parts.append(_pack_qp(em.input_qp))
    parts.append(struct.pack("<H", len(em.act_qps)))
    for qp in em.act_qps:
        parts.append(_pack_qp(qp))
    width = code_width(k)
    for spec in em.layers:
        idx = spec.layer_index
        if idx in em.codes:
            cm = em.codes[idx]
            parts.append(struct.pack("<IBB", cm.num_rows, int(cm.group), width))
            parts.append(_pack_qp(em.weight_qparams[idx]))
            dt = "<u1" if width == 1 else "<u2"
            parts.append(np.ascontiguousarray(cm.codes.astype(dt)).tobytes())
        elif idx in em.escapes:
            q, qp = em.escapes[idx]
            parts.append(struct.pack("<I", q.size))
            parts.append(_pack_qp(qp))
            parts.append(q.astype("<i1").tobytes())
        if idx in em.biases:
            b = em.biases[idx]
            parts.append(struct.pack("<I", b.size))
            parts.append(b.astype("<f4").tobytes())
        if idx in em.bn:
            s = em.bn[idx]
            parts.append(struct.pack("<I", s.gamma.size))
            for arr in (s.gamma, s.beta, s.mean, s.var):
                parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def _serialize_codebooks(pair: F16CodebookPair) -> bytes:
    parts = []
    for gid in (GroupId.G3X3, GroupId.G1X1FC):
        books = pair.groups.get(gid)
        if books is None:
            parts.append(struct.pack(GROUP_FMT, int(gid), 0, 0, 0))
            continue
        k, dsub = books[0].shape
        parts.append(struct.pack(GROUP_FMT, int(gid), len(books), k, dsub))
        for book in books:
            parts.append(np.ascontiguousarray(book.astype("<f2")).tobytes())
    return b"".join(parts)


def serialize(models: list[EncodedModel], pair: F16CodebookPair) -> bytes:
    """Emit the packed deployment bundle; deterministic for identical
    inputs."""
    cb = _serialize_codebooks(pair)
    model_blobs = [_serialize_model(em, pair.k) for em in models]
    names = [em.name.encode("utf-8") for em in models]
    if len(set(names)) != len(names):
        raise BundleFormatError("bundled model names must be unique")
    toc_len = sum(1 + len(n) + 8 for n in names)
    codebook_off = HEADER_SIZE
    toc_off = codebook_off + len(cb)
    model_off0 = toc_off + toc_len
    offs = []
    cursor = model_off0
    for blob in model_blobs:
        offs.append(cursor)
        cursor += len(blob)
    accounting_off = cursor
    accounting_len = 16 + 8 * len(models)
    total = accounting_off + accounting_len
    header = struct.pack(HEADER_FMT, MAGIC, VERSION, len(models),
                         codebook_off, toc_off, accounting_off, total)
    toc = b"".join(
        struct.pack("<B", len(n)) + n + struct.pack("<II", off, len(blob))
        for n, off, blob in zip(names, offs, model_blobs)
    )
    accounting = struct.pack("<IIII", HEADER_SIZE, len(cb), toc_len,
                             accounting_len)
    accounting += b"".join(
        struct.pack("<II", em.original_param_bytes, len(blob))
        for em, blob in zip(models, model_blobs)
    )
    out = header + cb + toc + b"".join(model_blobs) + accounting
    assert len(out) == total
    return out


# ----------------------------------------------------------------------
# parsing


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.off = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise BundleFormatError(
                f"truncated bundle: need {size} bytes at offset {self.off}, "
                f"have {len(self.data) - self.off}"
            )
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return vals if len(vals) > 1 else vals[0]

    def take_bytes(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise BundleFormatError(
                f"truncated bundle: need {n} bytes at offset {self.off}, "
                f"have {len(self.data) - self.off}"
            )
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def take_array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take_bytes(itemsize * count), dtype=dtype).copy()


@dataclass
class BundleAccounting:
    header_bytes: int
    codebook_bytes: int
    toc_bytes: int
    accounting_bytes: int
    per_model: list[tuple[int, int]]  # (original f32 bytes, packed bytes)

    def total(self) -> int:
        return (self.header_bytes + self.codebook_bytes + self.toc_bytes
                + self.accounting_bytes + sum(m for _, m in self.per_model))


class Bundle:
    """Parsed view over an immutable bundle byte buffer (the modeled
    read-only flash side); per-model sections parse lazily."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        r = _Reader(self.data)
        magic, version, model_count, cb_off, toc_off, acct_off, total = r.take(
            HEADER_FMT
        )
        if magic != MAGIC:
            raise BundleFormatError(
                f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})"
            )
        if version != VERSION:
            raise BundleFormatError(
                f"unsupported bundle version {version} (expected {VERSION})"
            )
        if total != len(self.data):
            raise BundleFormatError(
                f"declared size {total} bytes but buffer holds {len(self.data)}"
            )
        self.model_count = model_count
        self._toc: dict[str, tuple[int, int]] = {}
        self._toc_order: list[str] = []
        r = _Reader(self.data, cb_off)
        groups: dict[GroupId, list[np.ndarray] | None] = {}
        k_seen = 0
        subvectors = 0
        for _ in range(2):
            gid, m, k, dsub = r.take(GROUP_FMT)
            gid = GroupId(gid)
            if m == 0:
                groups[gid] = None
                continue
            books = [
                r.take_array("<f2", k * dsub).reshape(k, dsub) for _ in range(m)
            ]
            groups[gid] = books
            k_seen = k
            subvectors = m
        self.pair = F16CodebookPair(groups=groups, k=k_seen,
                                    subvectors=subvectors)
        r = _Reader(self.data, toc_off)
        for _ in range(model_count):
            nlen = r.take("<B")
            name = r.take_bytes(nlen).decode("utf-8")
            off, length = r.take("<II")
            self._toc[name] = (off, length)
            self._toc_order.append(name)
        self.toc_bytes = r.off - toc_off
        r = _Reader(self.data, acct_off)
        hdr, cb, toc, acct = r.take("<IIII")
        per_model = [tuple(r.take("<II")) for _ in range(model_count)]
        self.accounting = BundleAccounting(hdr, cb, toc, acct, per_model)

    @property
    def names(self) -> list[str]:
        return list(self._toc_order)

    def model_span(self, name: str) -> tuple[int, int]:
        try:
            return self._toc[name]
        except KeyError:
            raise BundleFormatError(
                f"model {name!r} not in bundle (has {self._toc_order})"
            ) from None

    def parse_model(self, name: str) -> EncodedModel:
        off, length = self.model_span(name)
        r = _Reader(self.data[off:off + length])
        n_layers = r.take("<H")
        raw = [r.take(LAYER_FMT) for _ in range(n_layers)]
        specs = [_spec_from_fields(k, li, p0, p1, p2, p3)
                 for k, _, li, p0, p1, p2, p3 in raw]
        flags = {li: fl for k, fl, li, *_ in raw}
        rank = r.take("<B")
        input_shape = tuple(r.take("<I") for _ in range(rank))
        n_cls = r.take("<H")
        input_qp = QuantParams(*r.take(QP_FMT))
        n_act = r.take("<H")
        act_qps = [QuantParams(*r.take(QP_FMT)) for _ in range(n_act)]
        em = EncodedModel(
            name=name, layers=specs, input_shape=input_shape,
            num_classes=n_cls, original_param_bytes=0,
            input_qp=input_qp, act_qps=act_qps,
        )
        for spec in specs:
            idx = spec.layer_index
            fl = flags[idx]
            if fl & FLAG_COMPRESSED:
                rows, gid, width = r.take("<IBB")
                qp = QuantParams(*r.take(QP_FMT))
                dt = "<u1" if width == 1 else "<u2"
                codes = r.take_array(dt, rows * self.pair.subvectors)
                em.codes[idx] = CodeMatrix(
                    group=GroupId(gid),
                    codes=codes.astype(np.uint16).reshape(
                        rows, self.pair.subvectors
                    ),
                )
                em.weight_qparams[idx] = qp
            elif fl & FLAG_ESCAPE:
                count = r.take("<I")
                qp = QuantParams(*r.take(QP_FMT))
                em.escapes[idx] = (r.take_array("<i1", count), qp)
            if fl & FLAG_HAS_BIAS:
                count = r.take("<I")
                em.biases[idx] = r.take_array("<f4", count)
            if spec.kind == LayerKind.BATCH_NORM:
                count = r.take("<I")
                em.bn[idx] = BNStats(
                    gamma=r.take_array("<f4", count),
                    beta=r.take_array("<f4", count),
                    mean=r.take_array("<f4", count),
                    var=r.take_array("<f4", count),
                )
        if r.off != length:
            raise BundleFormatError(
                f"model {name}: {length - r.off} unparsed trailing bytes"
            )
        pos = self._toc_order.index(name)
        em.original_param_bytes = self.accounting.per_model[pos][0]
        return em

    def codeword_bytes_touched(self, em: EncodedModel) -> int:
        """Bytes of codeword data read while decoding one model (each row
        looks up M codewords of dsub float16 values)."""
        total = 0
        for cm in em.codes.values():
            books = self.pair.subbooks(cm.group)
            dsub = books[0].shape[1]
            total += cm.num_rows * len(books) * dsub * 2
        return total


def parse_bundle(data: bytes) -> Bundle:
    return Bundle(data)


# ----------------------------------------------------------------------
# compression accounting


@dataclass
class ModelBreakdown:
    name: str
    original_bytes: int
    packed_bytes: int
    amortized_bytes: float  # packed + equal share of shared sections


@dataclass
class CompressionReport:
    total_original_bytes: int
    total_bundle_bytes: int
    ratio: float
    per_model: list[ModelBreakdown]


def compression_ratio(originals: list[ModelGraph],
                      bundle_data: bytes) -> CompressionReport:
    """Total f32 parameter bytes of the originals over the bundle length,
    with shared codebook/overhead bytes amortized equally per model."""
    b = parse_bundle(bundle_data)
    if len(originals) != b.model_count:
        raise ValueError(
            f"{len(originals)} originals vs {b.model_count} bundled models"
        )
    total_orig = sum(m.param_bytes_f32() for m in originals)
    total_bundle = len(bundle_data)
    shared = (b.accounting.header_bytes + b.accounting.codebook_bytes
              + b.accounting.toc_bytes + b.accounting.accounting_bytes)
    share = shared / max(b.model_count, 1)
    per_model = []
    for model, name, (orig, packed) in zip(originals, b.names,
                                           b.accounting.per_model):
        per_model.append(
            ModelBreakdown(
                name=name,
                original_bytes=model.param_bytes_f32(),
                packed_bytes=packed,
                amortized_bytes=packed + share,
            )
        )
    return CompressionReport(
        total_original_bytes=total_orig,
        total_bundle_bytes=total_bundle,
        ratio=total_orig / total_bundle,
        per_model=per_model,
    )
