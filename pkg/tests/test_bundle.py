import numpy as np
import pytest

from pqpack.bundle import (
    BundleFormatError,
    build_encoded_model,
    compression_ratio,
    deployment_weight,
    float_deployment_model,
    parse_bundle,
    serialize,
)
from pqpack.nn import LayerKind
from pqpack.optimize import OptimizeConfig, optimize_model
from pqpack.pool import pool_weights
from pqpack.pq import learn_codebooks
from pqpack.quant import to_f16_pair
from tests.conftest import tiny_cnn, tiny_mlp


def expected_bundle_size(models, pair_f16) -> int:
    """Independent byte-counting oracle derived from the documented
    layout, not from the serializer."""
    from pqpack.pool import GroupId

    total = 24  # header
    for gid in (GroupId.G3X3, GroupId.G1X1FC):
        books = pair_f16.groups.get(gid)
        total += 6
        if books is not None:
            for b in books:
                total += b.shape[0] * b.shape[1] * 2
    width = 1 if pair_f16.k <= 256 else 2
    for em in models:
        total += 1 + len(em.name.encode()) + 8  # toc entry
        size = 2 + 16 * len(em.layers)
        size += 1 + 4 * len(em.input_shape) + 2
        size += 5 + 2 + 5 * len(em.act_qps)
        for spec in em.layers:
            idx = spec.layer_index
            if idx in em.codes:
                size += 6 + 5 + em.codes[idx].num_rows * pair_f16.subvectors * width
            elif idx in em.escapes:
                size += 4 + 5 + em.escapes[idx][0].size
            if idx in em.biases:
                size += 4 + 4 * em.biases[idx].size
            if idx in em.bn:
                size += 4 + 16 * em.bn[idx].gamma.size
        total += size
    total += 16 + 8 * len(models)  # accounting
    return total


@pytest.fixture(scope="module")
def encoded_pairs():
    rng = np.random.default_rng(5)
    models = [tiny_cnn("alpha", seed=31), tiny_mlp("beta", seed=32)]
    pair = learn_codebooks(pool_weights(models), k=8, seed=6)
    f16 = to_f16_pair(pair)
    ems = []
    for model in models:
        if model.layers[0].kind == LayerKind.CONV3X3:
            calib = rng.standard_normal((40, 2, 8, 8)).astype(np.float32)
        else:
            calib = rng.standard_normal((40, 2)).astype(np.float32)
        tx, ty = calib, rng.integers(0, 3, 40)
        result = optimize_model(
            model, pair, tx, np.clip(ty, 0, 2), tx, np.clip(ty, 0, 2),
            OptimizeConfig(seed=7, max_outer_iters=0,
                           finetune_epochs_per_step=1),
        )
        ems.append(build_encoded_model(result.model, result.codes,
                                       result.finetune_set, f16, calib,
                                       model.param_bytes_f32()))
    return models, ems, f16


def test_empty_model_list_closed_form(encoded_pairs):
    _, _, f16 = encoded_pairs
    blob = serialize([], f16)
    assert len(blob) == expected_bundle_size([], f16)
    b = parse_bundle(blob)
    assert b.model_count == 0
    assert b.names == []


def test_round_trip_bitwise(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    b = parse_bundle(blob)
    re_ems = [b.parse_model(name) for name in b.names]
    assert serialize(re_ems, b.pair) == blob


def test_size_matches_counting_oracle(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    assert len(blob) == expected_bundle_size(ems, f16)


def test_accounting_sums_to_total(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    b = parse_bundle(blob)
    assert b.accounting.total() == len(blob)


def test_corrupt_magic_rejected(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = bytearray(serialize(ems, f16))
    blob[:4] = b"XXXX"
    with pytest.raises(BundleFormatError, match="magic"):
        parse_bundle(bytes(blob))


def test_truncation_rejected_with_sizes(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    with pytest.raises(BundleFormatError, match=r"\d+"):
        parse_bundle(blob[:len(blob) - 7])


def test_unsupported_version_rejected(encoded_pairs):
    _, ems, f16 = encoded_pairs
    blob = bytearray(serialize(ems, f16))
    blob[4] = 99
    with pytest.raises(BundleFormatError, match="version"):
        parse_bundle(bytes(blob))


def test_unknown_model_name(encoded_pairs):
    _, ems, f16 = encoded_pairs
    b = parse_bundle(serialize(ems, f16))
    with pytest.raises(BundleFormatError, match="gamma"):
        b.parse_model("gamma")


def test_duplicate_names_rejected(encoded_pairs):
    _, ems, f16 = encoded_pairs
    with pytest.raises(BundleFormatError, match="unique"):
        serialize([ems[0], ems[0]], f16)


def test_compression_ratio_and_breakdown(encoded_pairs):
    models, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    rep = compression_ratio(models, blob)
    assert rep.total_original_bytes == sum(m.param_bytes_f32() for m in models)
    assert rep.total_bundle_bytes == len(blob)
    assert rep.ratio == pytest.approx(
        rep.total_original_bytes / rep.total_bundle_bytes
    )
    # breakdown sums back to the bundle total
    assert sum(m.amortized_bytes for m in rep.per_model) == pytest.approx(
        len(blob)
    )


def test_ratio_is_one_when_sizes_equal(encoded_pairs):
    """ratio = original bytes / bundle bytes by definition."""
    models, ems, f16 = encoded_pairs
    blob = serialize(ems, f16)
    scale = len(blob) / sum(m.param_bytes_f32() for m in models)
    rep = compression_ratio(models, blob)
    assert rep.ratio * scale == pytest.approx(1.0)


def test_reported_reference_figures_are_rounding_consistent():
    """2.91 MB originals at a 11.57x ratio round to a 0.25 MB bundle;
    check the arithmetic is consistent under 2-decimal rounding."""
    originals_mb, ratio, size_mb = 2.91, 11.57, 0.25
    implied = originals_mb / ratio
    assert round(implied, 2) == size_mb
    lo, hi = originals_mb / (size_mb + 0.005), originals_mb / (size_mb - 0.005)
    assert lo <= ratio <= hi


def test_sublinear_growth_when_adding_model(encoded_pairs):
    models, ems, f16 = encoded_pairs
    one = serialize(ems[:1], f16)
    both = serialize(ems, f16)
    added = models[1]
    assert len(both) - len(one) < 0.5 * added.param_bytes_f32()


def test_float_deployment_model_runs(encoded_pairs, rng):
    models, ems, f16 = encoded_pairs
    dep = float_deployment_model(ems[0], f16)
    x = rng.standard_normal((4, 2, 8, 8)).astype(np.float32)
    out = dep.forward(x)
    assert out.shape == (4, models[0].layers[-2].out_features)


def test_deployment_weight_uses_f16_codewords(encoded_pairs):
    _, ems, f16 = encoded_pairs
    em = ems[0]
    idx, cm = next(iter(em.codes.items()))
    spec = em.layers[idx - 1]
    w = deployment_weight(cm, f16, spec.weight_shape())
    books = f16.widened(cm.group)
    row0 = np.concatenate([books[m][cm.codes[0, m]] for m in range(len(books))])
    n = min(w.size, row0.size)
    assert np.array_equal(w.reshape(-1)[:n], row0[:n])
