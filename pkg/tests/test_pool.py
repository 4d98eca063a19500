import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqpack.nn import LayerKind, LayerParams, LayerSpec, ModelGraph, build_model
from pqpack.pool import (
    GroupConfig,
    GroupId,
    PoolingError,
    layer_rows,
    pool_weights,
    unpool_layer,
)
from tests.conftest import tiny_cnn, tiny_mlp


def _single_layer_model(kind, weight, name="m", **spec_kw):
    spec = LayerSpec(kind, 1, **spec_kw)
    return ModelGraph(name, [spec],
                      {1: LayerParams(weight=weight.astype(np.float32))})


def test_one_conv3x3_two_kernels_one_row(rng):
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    model = _single_layer_model(LayerKind.CONV3X3, w, in_channels=1,
                                out_channels=2)
    p3, p1 = pool_weights([model])
    assert p3.num_rows == 1
    assert p1.num_rows == 0
    entry = p3.provenance[0]
    assert entry.pad_count == 0
    # row is both kernel slices concatenated, (out, in) order
    assert np.array_equal(p3.vectors[0], w.reshape(-1))


def test_fc_ten_weights_pads_second_row(rng):
    w = rng.standard_normal((2, 5)).astype(np.float32)  # 10 weights, d=8
    model = _single_layer_model(LayerKind.FULLY_CONNECTED, w, in_features=5,
                                out_features=2)
    _, p1 = pool_weights([model])
    assert p1.num_rows == 2
    entry = p1.provenance[0]
    assert entry.pad_count == 6
    assert np.array_equal(p1.vectors[1][2:], np.zeros(6, dtype=np.float32))
    recon = unpool_layer(p1.rows_for(entry), entry)
    assert np.array_equal(recon, w)
    assert recon.size == 10  # padding zeros are gone


def test_parameter_count_ratio_example():
    a = int(np.prod((140, 1, 3, 3)))
    b = int(np.prod((196, 112, 1, 1)))
    assert a == 1260
    assert b == 21952
    assert round(b / a, 1) == 17.4


def test_round_trip_all_layers_of_mixed_models():
    models = [tiny_cnn(seed=4), tiny_mlp(seed=5)]
    p3, p1 = pool_weights(models)
    by_name = {m.name: m for m in models}
    for pool in (p3, p1):
        for entry in pool.provenance:
            recon = unpool_layer(pool.rows_for(entry), entry)
            orig = by_name[entry.model].params[entry.layer_index].weight
            assert np.array_equal(recon, orig)


def test_group_purity():
    models = [tiny_cnn(seed=6), tiny_mlp(seed=7)]
    p3, p1 = pool_weights(models)
    for entry in p3.provenance:
        assert entry.kind == LayerKind.CONV3X3
    for entry in p1.provenance:
        assert entry.kind in (LayerKind.CONV1X1, LayerKind.FULLY_CONNECTED)


def test_disjointness_every_scalar_in_one_row_position():
    models = [tiny_cnn(seed=8)]
    p3, p1 = pool_weights(models)
    pooled = sum(
        int(np.prod(e.weight_shape))
        for pool in (p3, p1) for e in pool.provenance
    )
    codable_total = sum(
        models[0].params[i].weight.size for i in models[0].codable_layers()
    )
    assert pooled == codable_total
    total_cells = p3.vectors.size + p1.vectors.size
    total_pad = sum(e.pad_count for pool in (p3, p1) for e in pool.provenance)
    assert total_cells == pooled + total_pad


def test_bn_and_biases_never_pooled():
    model = tiny_cnn(seed=9)
    p3, p1 = pool_weights([model])
    bn_layers = {
        s.layer_index for s in model.layers if s.kind == LayerKind.BATCH_NORM
    }
    for pool in (p3, p1):
        for e in pool.provenance:
            assert e.layer_index not in bn_layers


def test_empty_model_list_rejected():
    with pytest.raises(PoolingError):
        pool_weights([])


@settings(max_examples=25, deadline=None)
@given(
    co=st.integers(1, 5), ci=st.integers(1, 4),
    kind=st.sampled_from([LayerKind.CONV3X3, LayerKind.CONV1X1,
                          LayerKind.FULLY_CONNECTED]),
    seed=st.integers(0, 10_000),
)
def test_layer_rows_round_trip_property(co, ci, kind, seed):
    rng = np.random.default_rng(seed)
    if kind == LayerKind.CONV3X3:
        shape = (co, ci, 3, 3)
    elif kind == LayerKind.CONV1X1:
        shape = (co, ci, 1, 1)
    else:
        shape = (co, ci)
    w = rng.standard_normal(shape).astype(np.float32)
    cfg = GroupConfig()
    rows, pad = layer_rows(w, kind, cfg)
    d = rows.shape[1]
    assert rows.size == w.size + pad
    assert pad < d
    flat = rows.reshape(-1)
    assert np.array_equal(flat[:w.size].reshape(shape), w)
    if pad:
        assert np.array_equal(flat[w.size:], np.zeros(pad, np.float32))


def test_group_config_validation():
    with pytest.raises(ValueError):
        GroupConfig(d_3x3=10)
    with pytest.raises(ValueError):
        GroupConfig(d_1x1fc=7)
    cfg = GroupConfig()
    assert cfg.vector_len(GroupId.G3X3) == 18
    assert cfg.subvector_len(GroupId.G3X3) == 9
    assert cfg.subvector_len(GroupId.G1X1FC) == 4
