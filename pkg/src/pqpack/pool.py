"""Pooling model weights into the two group-specific training matrices.

3x3 conv kernels feed one group (two intact 9-value kernel slices per
row), 1x1 conv and fully-connected weights feed the other (flat 8-value
slices).  Rows are zero-padded at the tail; provenance records every
layer's row range so pooling is exactly invertible.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .nn import LayerKind, ModelGraph


class PoolingError(ValueError):
    pass


class GroupId(IntEnum):
    G3X3 = 0
    G1X1FC = 1


_GROUP_OF_KIND = {
    LayerKind.CONV3X3: GroupId.G3X3,
    LayerKind.CONV1X1: GroupId.G1X1FC,
    LayerKind.FULLY_CONNECTED: GroupId.G1X1FC,
}


@dataclass(frozen=True)
class GroupConfig:
    d_3x3: int = 18
    d_1x1fc: int = 8
    subvectors: int = 2

    def __post_init__(self):
        if self.d_3x3 % 9 != 0:
            raise ValueError("d_3x3 must pack whole 3x3 kernel slices")
        if self.d_3x3 % self.subvectors or self.d_1x1fc % self.subvectors:
            raise ValueError("vector length must divide evenly into subvectors")

    def vector_len(self, group: GroupId) -> int:
        return self.d_3x3 if group == GroupId.G3X3 else self.d_1x1fc

    def subvector_len(self, group: GroupId) -> int:
        return self.vector_len(group) // self.subvectors


@dataclass(frozen=True)
class PoolSlice:
    """Provenance of one layer's rows inside a pool."""

    model: str
    layer_index: int
    kind: LayerKind
    weight_shape: tuple
    row_start: int
    row_end: int
    pad_count: int


@dataclass
class WeightPool:
    group: GroupId
    vector_len: int
    vectors: np.ndarray  # (num_rows, vector_len) float32
    provenance: list[PoolSlice] = field(default_factory=list)

    @property
    def num_rows(self) -> int:
        return self.vectors.shape[0]

    def rows_for(self, entry: PoolSlice) -> np.ndarray:
        return self.vectors[entry.row_start:entry.row_end]

    def training_rows(self) -> np.ndarray:
        """Rows used for codebook learning: all-padding rows are dropped
        (partial-pad rows are kept)."""
        keep = np.ones(self.num_rows, dtype=bool)
        for e in self.provenance:
            if e.pad_count >= self.vector_len:
                keep[e.row_end - 1] = False
        return self.vectors[keep]


def group_of(kind: LayerKind) -> GroupId:
    try:
        return _GROUP_OF_KIND[kind]
    except KeyError:
        raise PoolingError(f"layer kind {kind.name} is not poolable") from None


def layer_rows(weight: np.ndarray, kind: LayerKind,
               cfg: GroupConfig) -> tuple[np.ndarray, int]:
    """Pack one layer's weight tensor into zero-padded pool rows.

    3x3 kernels flatten as (out_channel, in_channel)-ordered 9-value
    slices; 1x1/FC weights flatten row-major.  Returns (rows, pad_count).
    """
    group = group_of(kind)
    d = cfg.vector_len(group)
    flat = np.ascontiguousarray(weight, dtype=np.float32).reshape(-1)
    pad = (-flat.size) % d
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.float32)])
    return flat.reshape(-1, d), pad


def pool_weights(models: list[ModelGraph],
                 cfg: GroupConfig = GroupConfig()) -> tuple[WeightPool, WeightPool]:
    """Collect every codable layer of every model into the two pools.

    Biases and batch-norm parameters are never pooled.  Each weight
    scalar lands in exactly one row position of exactly one group.
    """
    if not models:
        raise PoolingError("no models to pool")
    parts: dict[GroupId, list[np.ndarray]] = {g: [] for g in GroupId}
    prov: dict[GroupId, list[PoolSlice]] = {g: [] for g in GroupId}
    counts = {g: 0 for g in GroupId}
    for model in models:
        for spec in model.layers:
            if spec.kind == LayerKind.BATCH_NORM:
                continue
            if spec.kind not in _GROUP_OF_KIND:
                if spec.layer_index in model.params:
                    raise PoolingError(
                        f"model {model.name} layer {spec.layer_index}: "
                        f"unsupported kind {spec.kind.name}"
                    )
                continue
            weight = model.params[spec.layer_index].weight
            group = group_of(spec.kind)
            rows, pad = layer_rows(weight, spec.kind, cfg)
            start = counts[group]
            counts[group] += rows.shape[0]
            parts[group].append(rows)
            prov[group].append(
                PoolSlice(
                    model=model.name,
                    layer_index=spec.layer_index,
                    kind=spec.kind,
                    weight_shape=tuple(weight.shape),
                    row_start=start,
                    row_end=counts[group],
                    pad_count=pad,
                )
            )

    def _assemble(group: GroupId) -> WeightPool:
        d = cfg.vector_len(group)
        if parts[group]:
            vectors = np.concatenate(parts[group], axis=0)
        else:
            vectors = np.zeros((0, d), dtype=np.float32)
        return WeightPool(group=group, vector_len=d, vectors=vectors,
                          provenance=prov[group])

    return _assemble(GroupId.G3X3), _assemble(GroupId.G1X1FC)


def unpool_layer(pool_rows: np.ndarray, entry: PoolSlice) -> np.ndarray:
    """Rebuild a layer weight tensor from its pool rows, dropping padding."""
    d = pool_rows.shape[1]
    count = int(np.prod(entry.weight_shape))
    expected_rows = (count + d - 1) // d
    if pool_rows.shape[0] != expected_rows:
        raise PoolingError(
            f"model {entry.model} layer {entry.layer_index}: expected "
            f"{expected_rows} rows for shape {entry.weight_shape}, got "
            f"{pool_rows.shape[0]}"
        )
    flat = pool_rows.reshape(-1)
    if flat.size - count != entry.pad_count:
        raise PoolingError(
            f"model {entry.model} layer {entry.layer_index}: pad mismatch "
            f"({flat.size - count} trailing values vs recorded {entry.pad_count})"
        )
    return flat[:count].reshape(entry.weight_shape)
