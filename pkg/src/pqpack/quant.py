"""Numeric format conversions: affine int8 quantization and float16
codebook storage."""

from dataclasses import dataclass

import numpy as np

from .pool import GroupId
from .pq import CodebookPair

F16_MAX = 65504.0
QMIN, QMAX = -128, 127


class QuantRangeError(ValueError):
    pass


@dataclass(frozen=True)
class QuantParams:
    """Affine mapping r = scale * (q - zero_point), per tensor."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point out of int8 range: {self.zero_point}")


def round_half_away(x):
    """Round to nearest with halves away from zero (float64 internally)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def calibrate(tensor: np.ndarray) -> QuantParams:
    """Min/max affine calibration with the range widened to include 0,
    so real zero always maps to an exact integer."""
    t = np.asarray(tensor)
    if t.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if not np.all(np.isfinite(t)):
        raise ValueError("cannot calibrate a tensor with non-finite values")
    lo = min(float(t.min()), 0.0)
    hi = max(float(t.max()), 0.0)
    if hi == lo:
        # all-zero tensor: pick a tiny scale, centered zero point
        return QuantParams(scale=2.0 ** -8, zero_point=0)
    scale = (hi - lo) / 255.0
    z = int(round_half_away(-lo / scale)) + QMIN
    return QuantParams(scale=float(np.float32(scale)),
                       zero_point=int(np.clip(z, QMIN, QMAX)))


def quantize(tensor: np.ndarray, qp: QuantParams) -> np.ndarray:
    """q = clamp(round(r / S) + Z, -128, 127), halves away from zero."""
    q = round_half_away(np.asarray(tensor, dtype=np.float64) / qp.scale)
    return np.clip(q + qp.zero_point, QMIN, QMAX).astype(np.int8)


def dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    """r = S * (q - Z), computed in float32."""
    return (q.astype(np.float32) - np.float32(qp.zero_point)) * np.float32(qp.scale)


def quantize_to_int32(tensor: np.ndarray, scale: float) -> np.ndarray:
    """Symmetric int32 quantization (used for biases at scale S_in*S_w)."""
    q = round_half_away(np.asarray(tensor, dtype=np.float64) / scale)
    return np.clip(q, np.iinfo(np.int32).min, np.iinfo(np.int32).max).astype(np.int32)


def to_f16(values: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even binary16 conversion with range checking."""
    v = np.asarray(values, dtype=np.float32)
    if np.any(np.abs(v) > F16_MAX):
        worst = float(np.abs(v).max())
        raise QuantRangeError(
            f"value magnitude {worst} exceeds binary16 range (+-{F16_MAX}); "
            "treating as corruption"
        )
    return v.astype(np.float16)


@dataclass
class F16CodebookPair:
    """Deployment copy of a codebook pair with float16 codewords."""

    groups: dict[GroupId, list[np.ndarray] | None]  # each (K, dsub) float16
    k: int
    subvectors: int

    def subbooks(self, group: GroupId) -> list[np.ndarray]:
        books = self.groups.get(group)
        if books is None:
            raise ValueError(f"f16 pair has no {group.name} group")
        return books

    def widened(self, group: GroupId) -> list[np.ndarray]:
        """float32 view of the stored float16 codewords (exact widening)."""
        return [b.astype(np.float32) for b in self.subbooks(group)]


def to_f16_pair(pair: CodebookPair) -> F16CodebookPair:
    """Halve codebook storage: every float32 codeword value becomes its
    nearest binary16 neighbor.  Requires a frozen pair."""
    if not pair.frozen:
        raise ValueError("refusing to convert an unfrozen codebook pair")
    groups: dict[GroupId, list[np.ndarray] | None] = {}
    for gid, books in pair.groups.items():
        if books is None:
            groups[gid] = None
        else:
            groups[gid] = [to_f16(b.codewords) for b in books]
    return F16CodebookPair(groups=groups, k=pair.k, subvectors=pair.cfg.subvectors)
