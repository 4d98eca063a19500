import numpy as np
import pytest

from pqpack.nn import (
    LayerKind,
    LayerSpec,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    evaluate,
    train,
)
from tests.conftest import tiny_cnn, tiny_mlp


def separable_blobs(n=200, margin=1.0, seed=0):
    """Two 2-D blobs separated by at least ``margin`` along x0."""
    rng = np.random.default_rng(seed)
    half = n // 2
    a = rng.normal(0, 0.3, (half, 2)) + np.array([-1.5, 0.0])
    b = rng.normal(0, 0.3, (half, 2)) + np.array([1.5, 0.0])
    a[:, 0] = np.minimum(a[:, 0], -margin / 2)
    b[:, 0] = np.maximum(b[:, 0], margin / 2)
    x = np.concatenate([a, b]).astype(np.float32)
    y = np.concatenate([np.zeros(half), np.ones(half)]).astype(np.int64)
    return x, y


def perceptron_separates(x, y, epochs=100) -> bool:
    """Oracle: the perceptron algorithm converges iff the set is
    linearly separable (within the epoch budget)."""
    w = np.zeros(x.shape[1] + 1)
    xb = np.hstack([x, np.ones((len(x), 1))])
    sign = 2 * y - 1
    for _ in range(epochs):
        mistakes = 0
        for i in range(len(x)):
            if sign[i] * (xb[i] @ w) <= 0:
                w += sign[i] * xb[i]
                mistakes += 1
        if mistakes == 0:
            return True
    return False


def test_blobs_are_separable_by_perceptron_oracle():
    x, y = separable_blobs()
    assert perceptron_separates(x, y)


def test_train_linear_classifier_on_blobs():
    x, y = separable_blobs()
    specs = [LayerSpec(LayerKind.FULLY_CONNECTED, 1, in_features=2,
                       out_features=2)]
    model = build_model("lin", specs, seed=0)
    report = train(model, x, y, TrainConfig(epochs=50, batch_size=16, seed=1))
    assert report.accuracy >= 0.99


def test_all_frozen_means_bitwise_unchanged(rng):
    model = tiny_mlp(seed=5)
    x = rng.standard_normal((64, 2)).astype(np.float32)
    y = rng.integers(0, 3, 64)
    before = {
        (i, n): a.copy()
        for i, p in model.params.items() for n, a in p.named_arrays()
    }
    loss_before = evaluate(model, x, y, return_loss=True)[0]
    model.frozen = set(model.params)
    report = train(model, x, y, TrainConfig(epochs=3, seed=2))
    for (i, n), arr in before.items():
        assert np.array_equal(arr, getattr(model.params[i], n)), (i, n)
    assert evaluate(model, x, y, return_loss=True)[0] == loss_before
    assert report.steps > 0


def test_same_seed_bitwise_identical(rng):
    x = rng.standard_normal((80, 2, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, 80)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=9)
    m1, m2 = tiny_cnn(seed=4), tiny_cnn(seed=4)
    train(m1, x, y, cfg)
    train(m2, x, y, cfg)
    for i in m1.params:
        for n, a in m1.params[i].named_arrays():
            assert np.array_equal(a, getattr(m2.params[i], n)), (i, n)


def test_weight_only_freeze_keeps_bias_training(rng):
    model = tiny_mlp(seed=6)
    x = rng.standard_normal((64, 2)).astype(np.float32)
    y = rng.integers(0, 3, 64)
    w_before = model.params[3].weight.copy()
    b_before = model.params[3].bias.copy()
    train(model, x, y, TrainConfig(epochs=3, seed=0),
          freeze_weights=frozenset({3}))
    assert np.array_equal(model.params[3].weight, w_before)
    assert not np.array_equal(model.params[3].bias, b_before)


def test_nan_loss_aborts_with_step(rng):
    model = tiny_mlp(seed=7)
    model.params[1].weight[:] = np.float32(2e38)
    x = rng.standard_normal((32, 2)).astype(np.float32) * 1e4
    y = rng.integers(0, 3, 32)
    with pytest.raises(TrainingDivergedError) as err:
        train(model, x, y, TrainConfig(epochs=1, seed=0))
    assert err.value.step >= 1


def test_labels_out_of_range_rejected(rng):
    model = tiny_mlp(seed=8)
    x = rng.standard_normal((10, 2)).astype(np.float32)
    y = np.full(10, 7, dtype=np.int64)
    with pytest.raises(ValueError, match="labels"):
        train(model, x, y, TrainConfig(epochs=1))


def test_empty_dataset_rejected():
    model = tiny_mlp(seed=8)
    with pytest.raises(ValueError, match="empty"):
        train(model, np.zeros((0, 2), np.float32), np.zeros(0, np.int64),
              TrainConfig(epochs=1))


def test_bn_statistics_freeze_after_training(rng):
    model = tiny_cnn(seed=9)
    x = rng.standard_normal((64, 2, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, 64)
    assert not model.bn_static
    train(model, x, y, TrainConfig(epochs=2, seed=3))
    assert model.bn_static
    rm = model.params[2].running_mean.copy()
    train(model, x, y, TrainConfig(epochs=2, seed=4))
    assert np.array_equal(model.params[2].running_mean, rm)


def test_loss_decreases_on_separable_set():
    x, y = separable_blobs(seed=3)
    model = tiny_mlp(seed=10, classes=2)
    report = train(model, x, y, TrainConfig(epochs=10, seed=1))
    assert report.epoch_losses[-1] < report.epoch_losses[0]
