import numpy as np
import pytest

from pqpack.nn import LayerKind, LayerSpec, ModelGraph, build_model


def tiny_cnn(name: str = "cnn", seed: int = 1, classes: int = 4) -> ModelGraph:
    """Small net touching every layer kind."""
    specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=2, out_channels=8, padding=1),
        LayerSpec(LayerKind.BATCH_NORM, 2, in_channels=8),
        LayerSpec(LayerKind.RELU, 3),
        LayerSpec(LayerKind.MAX_POOL, 4, pool_size=2),
        LayerSpec(LayerKind.CONV1X1, 5, in_channels=8, out_channels=12),
        LayerSpec(LayerKind.RELU, 6),
        LayerSpec(LayerKind.AVG_POOL, 7, pool_size=2),
        LayerSpec(LayerKind.FLATTEN, 8),
        LayerSpec(LayerKind.FULLY_CONNECTED, 9, in_features=12 * 2 * 2,
                  out_features=classes),
        LayerSpec(LayerKind.SOFTMAX_CLASSIFIER, 10),
    ]
    return build_model(name, specs, seed)


def tiny_mlp(name: str = "mlp", seed: int = 2, classes: int = 3) -> ModelGraph:
    specs = [
        LayerSpec(LayerKind.FULLY_CONNECTED, 1, in_features=2, out_features=24),
        LayerSpec(LayerKind.RELU, 2),
        LayerSpec(LayerKind.FULLY_CONNECTED, 3, in_features=24, out_features=24),
        LayerSpec(LayerKind.RELU, 4),
        LayerSpec(LayerKind.FULLY_CONNECTED, 5, in_features=24,
                  out_features=classes),
    ]
    return build_model(name, specs, seed)


def conv_stack(name: str = "stack", seed: int = 3, classes: int = 4) -> ModelGraph:
    """Five codable layers; used by optimizer fixtures."""
    specs = [
        LayerSpec(LayerKind.CONV3X3, 1, in_channels=1, out_channels=6, padding=1),
        LayerSpec(LayerKind.RELU, 2),
        LayerSpec(LayerKind.CONV3X3, 3, in_channels=6, out_channels=8, padding=1),
        LayerSpec(LayerKind.RELU, 4),
        LayerSpec(LayerKind.MAX_POOL, 5, pool_size=2),
        LayerSpec(LayerKind.CONV1X1, 6, in_channels=8, out_channels=12),
        LayerSpec(LayerKind.RELU, 7),
        LayerSpec(LayerKind.FLATTEN, 8),
        LayerSpec(LayerKind.FULLY_CONNECTED, 9, in_features=12 * 4 * 4,
                  out_features=16),
        LayerSpec(LayerKind.RELU, 10),
        LayerSpec(LayerKind.FULLY_CONNECTED, 11, in_features=16,
                  out_features=classes),
    ]
    return build_model(name, specs, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def cnn_model():
    return tiny_cnn()


@pytest.fixture
def mlp_model():
    return tiny_mlp()
