"""Sequential model graph: an ordered layer list plus parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .layers import LayerKind, LayerParams, LayerSpec, ShapeMismatchError


@dataclass
class ModelGraph:
    """Topologically ordered layer list with a parameter map.

    ``frozen`` layers are inert during training: no gradient updates and,
    for batch norm, no running-statistic updates.  ``bn_static`` switches
    every batch-norm layer to its stored statistics; it is flipped on when
    an initial training run completes so later finetuning cannot drift the
    stats.
    """

    name: str
    layers: list[LayerSpec]
    params: dict[int, LayerParams]
    frozen: set[int] = field(default_factory=set)
    bn_static: bool = False

    def validate(self) -> None:
        indices = [spec.layer_index for spec in self.layers]
        if indices != list(range(1, len(self.layers) + 1)):
            raise ValueError(
                f"model {self.name}: layer_index must run 1..L, got {indices}"
            )
        for spec in self.layers:
            has = spec.layer_index in self.params
            if spec.kind in L.PARAMETERIZED_KINDS:
                if not has or self.params[spec.layer_index].weight is None:
                    raise ValueError(f"{spec.describe()}: missing weight tensor")
                got = self.params[spec.layer_index].weight.shape
                want = spec.weight_shape()
                if tuple(got) != tuple(want):
                    raise ValueError(
                        f"{spec.describe()}: weight shape {got}, expected {want}"
                    )
            elif has:
                raise ValueError(f"{spec.describe()}: unexpected parameters")
        bad = self.frozen - {
            s.layer_index for s in self.layers if s.kind in L.PARAMETERIZED_KINDS
        }
        if bad:
            raise ValueError(f"model {self.name}: frozen non-parameterized layers {bad}")

    # ------------------------------------------------------------------
    # structure helpers

    def spec(self, layer_index: int) -> LayerSpec:
        return self.layers[layer_index - 1]

    def parameterized_layers(self) -> list[int]:
        return [
            s.layer_index for s in self.layers if s.kind in L.PARAMETERIZED_KINDS
        ]

    def codable_layers(self) -> list[int]:
        """Layers whose weights go through the codebooks (conv and FC)."""
        return [s.layer_index for s in self.layers if s.kind in L.CODABLE_KINDS]

    def first_last_codable(self) -> tuple[int, int]:
        codable = self.codable_layers()
        if not codable:
            raise ValueError(f"model {self.name} has no codable layers")
        return codable[0], codable[-1]

    def num_params(self) -> int:
        return sum(
            arr.size for p in self.params.values() for _, arr in p.named_arrays()
        )

    def param_bytes_f32(self) -> int:
        return 4 * self.num_params()

    def copy(self, name: str | None = None) -> "ModelGraph":
        return ModelGraph(
            name=name or self.name,
            layers=list(self.layers),
            params={k: v.copy() for k, v in self.params.items()},
            frozen=set(self.frozen),
            bn_static=self.bn_static,
        )

    def astype(self, dtype) -> "ModelGraph":
        out = self.copy()
        for p in out.params.values():
            for attr, arr in list(p.named_arrays()):
                setattr(p, attr, arr.astype(dtype))
        return out

    # ------------------------------------------------------------------
    # execution

    def forward(self, batch: np.ndarray, capture: bool = False):
        """Inference pass (batch norm uses stored statistics).

        With ``capture=True`` also returns every op's output, in layer
        order, for activation calibration.
        """
        x = batch
        captured = []
        for spec in self.layers:
            x = self._apply(spec, x, train_mode=False, caches=None)
            if capture:
                captured.append(x)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(
                f"model {self.name}: non-finite values in forward output"
            )
        return (x, captured) if capture else x

    def forward_train(self, batch: np.ndarray):
        """Training pass; returns (logits, caches for backward)."""
        x = batch
        caches = []
        for spec in self.layers:
            x = self._apply(spec, x, train_mode=True, caches=caches)
        return x, caches

    def _apply(self, spec, x, *, train_mode, caches):
        kind = spec.kind
        p = self.params.get(spec.layer_index)
        cache = None
        if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
            x, cache = L.conv_forward(spec, p, x)
        elif kind == LayerKind.FULLY_CONNECTED:
            x, cache = L.fc_forward(spec, p, x)
        elif kind == LayerKind.BATCH_NORM:
            static = (
                self.bn_static
                or not train_mode
                or spec.layer_index in self.frozen
            )
            x, cache = L.bn_forward(spec, p, x, static=static)
        elif kind == LayerKind.RELU:
            x, cache = L.relu_forward(spec, x)
        elif kind == LayerKind.MAX_POOL:
            x, cache = L.maxpool_forward(spec, x)
        elif kind == LayerKind.AVG_POOL:
            x, cache = L.avgpool_forward(spec, x)
        elif kind == LayerKind.FLATTEN:
            x, cache = L.flatten_forward(spec, x)
        elif kind == LayerKind.SOFTMAX_CLASSIFIER:
            cache = None  # identity: emits logits
        else:
            raise ValueError(f"unsupported layer kind {kind}")
        if caches is not None:
            caches.append(cache)
        return x

    def backward(self, dlogits: np.ndarray, caches: list):
        """Backprop through the cached training pass.

        Returns gradients keyed by (layer_index, slot) with slot in
        {"weight", "bias"}.  Frozen layers get no entries.
        """
        grads: dict[tuple[int, str], np.ndarray] = {}
        g = dlogits
        for spec, cache in zip(reversed(self.layers), reversed(caches)):
            kind = spec.kind
            p = self.params.get(spec.layer_index)
            if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
                g, dw, db = L.conv_backward(spec, p, g, cache)
            elif kind == LayerKind.FULLY_CONNECTED:
                g, dw, db = L.fc_backward(spec, p, g, cache)
            elif kind == LayerKind.BATCH_NORM:
                g, dw, db = L.bn_backward(spec, p, g, cache)
            elif kind == LayerKind.RELU:
                g = L.relu_backward(g, cache)
                continue
            elif kind == LayerKind.MAX_POOL:
                g = L.maxpool_backward(g, cache)
                continue
            elif kind == LayerKind.AVG_POOL:
                g = L.avgpool_backward(g, cache)
                continue
            elif kind == LayerKind.FLATTEN:
                g = L.flatten_backward(g, cache)
                continue
            elif kind == LayerKind.SOFTMAX_CLASSIFIER:
                continue
            if spec.layer_index in self.frozen:
                continue
            grads[(spec.layer_index, "weight")] = dw
            if db is not None and p.bias is not None:
                grads[(spec.layer_index, "bias")] = db
        return grads


def num_classes(model: ModelGraph) -> int:
    for spec in reversed(model.layers):
        if spec.kind == LayerKind.FULLY_CONNECTED:
            return spec.out_features
        if spec.kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
            return spec.out_channels
    raise ValueError(f"model {model.name}: cannot infer class count")


def trace_shapes(layers: list[LayerSpec], input_shape: tuple) -> list[tuple]:
    """Per-layer output shapes (without the batch axis) for a single
    sample flowing through the layer list."""
    shape = tuple(input_shape)
    out = []
    for spec in layers:
        kind = spec.kind
        if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
            c, h, w = shape
            k = spec.kernel_size
            ho = (h + 2 * spec.padding - k) // spec.stride + 1
            wo = (w + 2 * spec.padding - k) // spec.stride + 1
            if ho <= 0 or wo <= 0:
                raise ShapeMismatchError(
                    f"{spec.describe()}: kernel does not fit input {h}x{w}"
                )
            shape = (spec.out_channels, ho, wo)
        elif kind == LayerKind.FULLY_CONNECTED:
            shape = (spec.out_features,)
        elif kind in (LayerKind.MAX_POOL, LayerKind.AVG_POOL):
            c, h, w = shape
            k = spec.pool_size
            shape = (c, h // k, w // k)
        elif kind == LayerKind.FLATTEN:
            shape = (int(np.prod(shape)),)
        # BATCH_NORM / RELU / SOFTMAX_CLASSIFIER keep their input shape
        out.append(shape)
    return out


def make_params(spec: LayerSpec, rng: np.random.Generator,
                dtype=np.float32) -> LayerParams:
    """He-initialized parameters for one layer spec."""
    kind = spec.kind
    if kind in (LayerKind.CONV3X3, LayerKind.CONV1X1):
        k = spec.kernel_size
        fan_in = spec.in_channels * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.weight_shape())
        return LayerParams(
            weight=w.astype(dtype),
            bias=np.zeros(spec.out_channels, dtype=dtype),
        )
    if kind == LayerKind.FULLY_CONNECTED:
        w = rng.normal(0.0, np.sqrt(2.0 / spec.in_features), spec.weight_shape())
        return LayerParams(
            weight=w.astype(dtype),
            bias=np.zeros(spec.out_features, dtype=dtype),
        )
    if kind == LayerKind.BATCH_NORM:
        c = spec.in_channels
        return LayerParams(
            weight=np.ones(c, dtype=dtype),
            bias=np.zeros(c, dtype=dtype),
            running_mean=np.zeros(c, dtype=dtype),
            running_var=np.ones(c, dtype=dtype),
        )
    raise ValueError(f"{spec.describe()} takes no parameters")


def build_model(name: str, specs: list[LayerSpec], seed: int) -> ModelGraph:
    rng = np.random.default_rng(seed)
    params = {
        s.layer_index: make_params(s, rng)
        for s in specs
        if s.kind in L.PARAMETERIZED_KINDS
    }
    model = ModelGraph(name=name, layers=specs, params=params)
    model.validate()
    return model
