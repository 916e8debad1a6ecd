"""Sequential network container and the declarative layer description."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as _layers
from .layers import (
    BackwardError,
    BatchNorm2d,
    Conv2d,
    ConvAttention,
    Flatten,
    GELU,
    LayerNorm,
    LeakyReLU,
    Linear,
    ReLU,
    ShapeError,
    Softmax,
    _WeightedLayer,
)

INPUT_SHAPE = (1, 11, 11)


def to_nchw(x):
    if x is None or x.ndim != 4:
        return x
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer: a kind tag plus constructor args."""

    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "args": dict(self.args)}

    @classmethod
    def from_dict(cls, d):
        args = dict(d.get("args", {}))
        if "normalized_shape" in args:
            args["normalized_shape"] = tuple(args["normalized_shape"])
        return cls(d["kind"], args)


def build_layer(spec, rng=None):
    a = spec.args
    k = spec.kind
    if k == "Conv2d":
        return Conv2d(a["in_channels"], a["out_channels"], a["kernel_size"],
                      bias=a.get("bias", True), rng=rng)
    if k == "Linear":
        return Linear(a["in_features"], a["out_features"], bias=a.get("bias", True), rng=rng)
    if k == "BatchNorm2d":
        return BatchNorm2d(a["num_features"])
    if k == "LayerNorm":
        return LayerNorm(a["normalized_shape"])
    if k == "ConvAttention":
        return ConvAttention(a["channels"], a["qkv_dim"], a.get("activation"), rng=rng)
    simple = {"ReLU": ReLU, "GELU": GELU, "LeakyReLU": LeakyReLU,
              "Softmax": Softmax, "Flatten": Flatten}
    if k in simple:
        return simple[k]()
    raise ValueError(f"unknown layer kind {k!r}")


class Network:
    """Ordered stack of layers with shape checking at construction.

    Parameters are addressed as ``"<layer index>.<name>"``, e.g. ``"0.weight"``
    or ``"1.q.weight"`` for the query conv inside an attention layer.
    """

    def __init__(self, layers, input_shape=INPUT_SHAPE):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.describe()}): {exc}") from None
            self.shapes.append(shape)
        if self.layers:
            self.layers[0].needs_input_grad = False
        self._forwarded = False

    @classmethod
    def from_specs(cls, specs, input_shape=INPUT_SHAPE, rng=None):
        return cls([build_layer(s, rng) for s in specs], input_shape)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def train(self, mode=True):
        for layer in self.layers:
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x, grad=False):
        """Run a (B, C, H, W) batch; 4-D outputs are returned as NCHW too."""
        x = np.asarray(x, dtype=_layers.DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input (B, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        for layer in self.layers:
            x = layer.forward(x, grad)
        self._forwarded = grad
        return to_nchw(x)

    __call__ = forward

    def backward(self, grad):
        if not self._forwarded:
            raise BackwardError("backward called without a forward pass with grad=True")
        self._forwarded = False
        grad = np.asarray(grad, dtype=_layers.DTYPE)
        if grad.ndim == 4:
            grad = np.ascontiguousarray(grad.transpose(0, 2, 3, 1))
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return to_nchw(grad)

    def predict(self, x, batch_size=1024):
        x = np.asarray(x, dtype=_layers.DTYPE)
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0,) + self.output_shape, _layers.DTYPE)

    def parameters(self):
        return {f"{i}.{name}": p
                for i, layer in enumerate(self.layers)
                for name, p in layer.params().items()}

    def buffers(self):
        return {f"{i}.{name}": b
                for i, layer in enumerate(self.layers)
                for name, b in layer.buffers().items()}

    def weighted_layers(self):
        """Maskable layers (conv and linear, including attention internals) by name."""
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, _WeightedLayer):
                out[str(i)] = layer
            elif isinstance(layer, ConvAttention):
                for name, sub in layer.sublayers().items():
                    out[f"{i}.{name}"] = sub
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        state.update({k: b.copy() for k, b in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        params, buffers = self.parameters(), self.buffers()
        for key, value in state.items():
            if key in params:
                target = params[key].data
            elif key in buffers:
                target = buffers[key]
            else:
                raise KeyError(f"unexpected state key {key!r}")
            if target.shape != np.shape(value):
                raise ShapeError(f"{key}: expected {target.shape}, got {np.shape(value)}")
            target[...] = value

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters().values()))

    def describe(self):
        return [layer.describe() for layer in self.layers]

    def __repr__(self):
        body = "\n".join(f"  ({i}) {d}" for i, d in enumerate(self.describe()))
        return f"Network(\n{body}\n)"
