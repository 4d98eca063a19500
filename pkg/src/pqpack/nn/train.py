"""Training loop: Adam, softmax cross-entropy, deterministic batching."""

from dataclasses import dataclass, field

import numpy as np

from .model import ModelGraph, num_classes as _model_num_classes


class TrainingDivergedError(RuntimeError):
    def __init__(self, model: str, step: int, layer_index: int | None):
        where = f"layer {layer_index}" if layer_index else "loss"
        super().__init__(
            f"model {model}: non-finite {where} at step {step}; aborting"
        )
        self.step = step
        self.layer_index = layer_index


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # stop after this many epochs without mean-loss improvement (None: off)
    early_stop_patience: int | None = None
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, epochs, batch_size must be positive")


@dataclass
class TrainReport:
    final_loss: float
    accuracy: float
    steps: int = 0
    epoch_losses: list = field(default_factory=list)


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """Apply one update; iteration order is sorted by key for
        determinism."""
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for key in sorted(grads):
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            m = self.m[key]
            v = self.v[key]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * (g * g)
            layer_index, slot = key
            p = params[layer_index]
            arr = getattr(p, slot)
            arr -= c.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus the logits gradient."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = labels.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(p[idx, labels]).mean())
    d = p
    d[idx, labels] -= 1.0
    d /= n
    return loss, d.astype(logits.dtype)


def _locate_nonfinite_layer(model: ModelGraph, xb: np.ndarray) -> int | None:
    try:
        _, outs = model.forward(xb, capture=True)
    except FloatingPointError:
        outs = None
    if outs is None:
        x = xb
        for spec in model.layers:
            x = model._apply(spec, x, train_mode=False, caches=None)
            if not np.all(np.isfinite(x)):
                return spec.layer_index
    return None


def train(
    model: ModelGraph,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    *,
    freeze_weights: frozenset | set = frozenset(),
) -> TrainReport:
    """Train in place with Adam on softmax cross-entropy.

    ``model.frozen`` layers are fully inert; ``freeze_weights`` pins only
    the weight slot of the listed layers so their biases keep training
    (used by the compression optimizer, whose frozen layers must stay
    bit-identical to their codebook reconstruction).

    Identical seed, config, and data give bit-identical parameters.  When
    the run completes, batch-norm layers switch to static statistics.
    """
    model.validate()
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    num_classes = _model_num_classes(model)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(
            f"labels out of range [0, {num_classes}): {y.min()}..{y.max()}"
        )
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(cfg)
    skip = {
        key
        for key in _param_keys(model)
        if key[0] in model.frozen
        or (key[1] == "weight" and key[0] in freeze_weights)
    }
    step = 0
    epoch_losses = []
    best_loss = np.inf
    stale = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            xb, yb = x[sel], y[sel]
            logits, caches = model.forward_train(xb)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    model.name, step, _locate_nonfinite_layer(model, xb)
                )
            grads = model.backward(dlogits, caches)
            for key in skip:
                grads.pop(key, None)
            adam.step(model.params, grads)
            running += loss
            batches += 1
        mean_loss = running / batches
        epoch_losses.append(mean_loss)
        if cfg.early_stop_patience is not None:
            if mean_loss < best_loss - cfg.min_delta:
                best_loss = mean_loss
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    model.bn_static = True
    final_loss, accuracy = evaluate(model, x, y, return_loss=True)
    return TrainReport(
        final_loss=final_loss,
        accuracy=accuracy,
        steps=step,
        epoch_losses=epoch_losses,
    )


def evaluate(model: ModelGraph, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256, return_loss: bool = False):
    """Accuracy (and optionally mean loss) over a labeled set."""
    correct = 0
    loss_sum = 0.0
    n = x.shape[0]
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = model.forward(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
        if return_loss:
            loss, _ = softmax_cross_entropy(logits, yb)
            loss_sum += loss * xb.shape[0]
    acc = correct / n
    if return_loss:
        return loss_sum / n, acc
    return acc


def _param_keys(model: ModelGraph):
    for layer_index, p in model.params.items():
        yield (layer_index, "weight")
        if p.bias is not None:
            yield (layer_index, "bias")
