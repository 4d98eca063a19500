import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqpack.pool import GroupId, pool_weights
from pqpack.pq import learn_codebooks
from pqpack.quant import (
    QuantParams,
    QuantRangeError,
    calibrate,
    dequantize,
    quantize,
    round_half_away,
    to_f16,
    to_f16_pair,
)
from tests.conftest import tiny_cnn, tiny_mlp


def test_symmetric_range_gives_zero_point_zero():
    qp = calibrate(np.array([-1.0, 0.25, 1.0], dtype=np.float32))
    assert qp.scale == pytest.approx(2.0 / 255.0)
    assert qp.zero_point == 0


def test_all_zeros_round_trips_exactly():
    t = np.zeros(17, dtype=np.float32)
    qp = calibrate(t)
    assert np.array_equal(dequantize(quantize(t, qp), qp), t)


def test_real_zero_always_maps_to_exact_integer(rng):
    for _ in range(20):
        t = rng.uniform(-3, 5, 64).astype(np.float32)
        qp = calibrate(t)
        q0 = quantize(np.zeros(1, dtype=np.float32), qp)
        assert dequantize(q0, qp)[0] == 0.0


def test_direct_substitution():
    qp = QuantParams(scale=0.5, zero_point=0)
    assert dequantize(np.array([4], dtype=np.int8), qp)[0] == 2.0


def test_grid_point_round_trips_exactly():
    qp = QuantParams(scale=0.25, zero_point=3)
    r = dequantize(np.arange(-128, 128, dtype=np.int8), qp)
    q = quantize(r, qp)
    assert np.array_equal(q, np.arange(-128, 128, dtype=np.int8))


def test_round_half_away_from_zero():
    x = np.array([0.5, 1.5, -0.5, -1.5, 2.49, -2.49])
    assert np.array_equal(round_half_away(x),
                          np.array([1.0, 2.0, -1.0, -2.0, 2.0, -2.0]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lo=st.floats(-10, -0.01),
       hi=st.floats(0.01, 10))
def test_round_trip_bound_property(seed, lo, hi):
    rng = np.random.default_rng(seed)
    t = rng.uniform(lo, hi, 256).astype(np.float32)
    qp = calibrate(t)
    back = dequantize(quantize(t, qp), qp)
    assert np.max(np.abs(t.astype(np.float64) - back)) <= qp.scale / 2 + 1e-7


def test_million_value_round_trip_and_saturation(rng):
    qp = QuantParams(scale=np.float32(0.02), zero_point=5)
    lo, hi = qp.scale * (-128 - qp.zero_point), qp.scale * (127 - qp.zero_point)
    r = rng.uniform(lo, hi, 1_000_000).astype(np.float32)
    back = dequantize(quantize(r, qp), qp)
    assert np.max(np.abs(r.astype(np.float64) - back)) <= qp.scale / 2 + 1e-7
    out = np.array([lo - 1.0, hi + 1.0], dtype=np.float32)
    q = quantize(out, qp)
    assert q[0] == -128 and q[1] == 127


def test_calibrate_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate(np.array([], dtype=np.float32))
    with pytest.raises(ValueError):
        calibrate(np.array([1.0, np.nan], dtype=np.float32))


def test_f16_exact_values():
    assert to_f16(np.array([1.0], dtype=np.float32))[0] == np.float16(1.0)
    v = to_f16(np.array([0.1], dtype=np.float32))[0]
    assert abs(float(v) - 0.1) <= 2.0 ** -11 * 0.1


def test_f16_half_ulp_bound(rng):
    vals = rng.uniform(-2, 2, 4096).astype(np.float32)
    f16 = to_f16(vals)
    err = np.abs(f16.astype(np.float64) - vals.astype(np.float64))
    rel = err / np.maximum(np.abs(vals.astype(np.float64)), 1e-6)
    # half-ULP relative bound holds in the normal range
    normal = np.abs(vals) > 6.2e-5
    assert rel[normal].max() <= 2.0 ** -11


def test_f16_out_of_range_rejected():
    with pytest.raises(QuantRangeError, match="binary16"):
        to_f16(np.array([70000.0], dtype=np.float32))


def test_f16_pair_halves_codebook_storage_and_bounds_perturbation():
    models = [tiny_cnn(seed=21), tiny_mlp(seed=22)]
    pair = learn_codebooks(pool_weights(models), k=8, seed=3)
    f16 = to_f16_pair(pair)
    for gid in (GroupId.G3X3, GroupId.G1X1FC):
        for book, half in zip(pair.subbooks(gid), f16.subbooks(gid)):
            assert half.dtype == np.float16
            assert half.nbytes * 2 == book.codewords.nbytes
            widened = half.astype(np.float32)
            for row, wrow in zip(book.codewords, widened):
                norm = np.linalg.norm(row.astype(np.float64))
                err = np.linalg.norm(
                    row.astype(np.float64) - wrow.astype(np.float64)
                )
                assert err <= 2.0 ** -11 * max(norm, 1e-6)


def test_f16_widening_is_exact():
    vals = np.array([0.5, -0.125, 3.0], dtype=np.float16)
    widened = vals.astype(np.float32)
    assert np.array_equal(widened.astype(np.float16), vals)


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(scale=0.0, zero_point=0)
    with pytest.raises(ValueError):
        QuantParams(scale=1.0, zero_point=300)
