"""Central-difference gradient validation (float64 mode only)."""

import numpy as np

from .model import ModelGraph
from .train import softmax_cross_entropy


def central_difference(f, theta: np.ndarray, h: float) -> np.ndarray:
    """Numeric gradient of scalar f at theta: (f(t+h) - f(t-h)) / 2h."""
    theta = theta.astype(np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(
    model: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    h: float = 1e-4,
    max_coords_per_tensor: int = 10,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference
    gradients over a sampled parameter subset.

    The model is copied to float64 first; h must lie in [1e-6, 1e-3].
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"h must be in [1e-6, 1e-3], got {h}")
    m = model.astype(np.float64)
    x = x.astype(np.float64)

    def loss_fn():
        logits, caches = m.forward_train(x)
        loss, dlogits = softmax_cross_entropy(logits, y)
        return loss, dlogits, caches

    loss, dlogits, caches = loss_fn()
    grads = m.backward(dlogits, caches)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (layer_index, slot), analytic in sorted(grads.items()):
        p = m.params[layer_index]
        arr = getattr(p, slot)
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        count = min(max_coords_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp, _, _ = loss_fn()
            flat[i] = orig - h
            fm, _, _ = loss_fn()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
