"""Parameter counts, MACs and bit operations for a resolved architecture.

Convention: for every weight-bearing op, ``BOPs = MACs * (1 - s) * b_w * b_a``
where ``s`` is that layer's weight sparsity. The two activation-by-activation
products inside attention use ``b_a * b_a`` and are never sparse. Norms,
activations and softmax cost nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .archspace import ArchitectureSpec


@dataclass(frozen=True)
class QuantSparsityConfig:
    weight_bits: int = 32
    act_bits: int = 32
    sparsity: float | Mapping[str, float] = 0.0

    def __post_init__(self):
        for name in ("weight_bits", "act_bits"):
            bits = getattr(self, name)
            if int(bits) != bits or not 1 <= bits <= 32:
                raise ValueError(f"{name} must be an integer in [1, 32], got {bits}")
        # global magnitude pruning may empty a small layer entirely
        if isinstance(self.sparsity, Mapping):
            bad = [s for s in self.sparsity.values() if not 0.0 <= s <= 1.0]
        else:
            bad = [] if 0.0 <= self.sparsity < 1.0 else [self.sparsity]
        if bad:
            raise ValueError(f"sparsity out of range: {bad[0]}")

    def sparsity_of(self, name):
        if isinstance(self.sparsity, Mapping):
            return float(self.sparsity.get(name, 0.0))
        return float(self.sparsity)


@dataclass(frozen=True)
class LayerCost:
    name: str
    op: str
    macs: int
    weights: int
    biases: int
    affine: int
    bops: int
    sparsity: float = 0.0

    @property
    def params(self):
        return self.weights + self.biases + self.affine


@dataclass
class CostReport:
    layers: list = field(default_factory=list)

    @property
    def params(self):
        return sum(c.params for c in self.layers)

    @property
    def macs(self):
        return sum(c.macs for c in self.layers)

    @property
    def bops(self):
        return sum(c.bops for c in self.layers)

    @property
    def mbops(self):
        return self.bops / 1e6

    @property
    def biases(self):
        return sum(c.biases for c in self.layers)

    def to_dict(self):
        return {"params": self.params, "macs": self.macs, "bops": self.bops,
                "mbops": self.mbops}


def _ops(spec: ArchitectureSpec):
    """Yield (name, op, macs, weights, biases, affine) for every costed op.

    Names match ``Network.weighted_layers()`` so sparsity maps line up.
    """
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes)):
        a = layer.args
        if layer.kind == "Conv2d":
            k = a["kernel_size"]
            cin, cout = a["in_channels"], a["out_channels"]
            ho, wo = shape[1] - k + 1, shape[2] - k + 1
            weights = cin * cout * k * k
            yield str(i), "Conv2d", weights * ho * wo, weights, cout if a.get("bias", True) else 0, 0
        elif layer.kind == "Linear":
            weights = a["in_features"] * a["out_features"]
            bias = a["out_features"] if a.get("bias", True) else 0
            yield str(i), "Linear", weights, weights, bias, 0
        elif layer.kind == "ConvAttention":
            c, d = a["channels"], a["qkv_dim"]
            tokens = shape[1] * shape[2]
            for sub in ("q", "k", "v"):
                yield f"{i}.{sub}", "Conv2d", c * d * tokens, c * d, d, 0
            yield f"{i}.proj", "Conv2d", d * c * tokens, d * c, c, 0
            yield f"{i}.attn", "AttentionMatmul", 2 * tokens * tokens * d, 0, 0, 0
        elif layer.kind == "BatchNorm2d":
            yield str(i), "BatchNorm2d", 0, 0, 0, 2 * a["num_features"]
        elif layer.kind == "LayerNorm":
            yield str(i), "LayerNorm", 0, 0, 0, 2 * math.prod(a["normalized_shape"])


def cost(spec: ArchitectureSpec, config: QuantSparsityConfig | None = None) -> CostReport:
    config = config or QuantSparsityConfig()
    report = CostReport()
    for name, op, macs, weights, biases, affine in _ops(spec):
        if op == "AttentionMatmul":
            s = 0.0
            bops = macs * config.act_bits * config.act_bits
        else:
            s = config.sparsity_of(name) if weights else 0.0
            # exact integer arithmetic when dense
            dense = macs * config.weight_bits * config.act_bits
            bops = dense if s == 0.0 else int(round(dense * (1.0 - s)))
        report.layers.append(LayerCost(name, op, macs, weights, biases, affine, bops, s))
    return report


def bops(spec, config=None):
    return cost(spec, config)


def macs(spec):
    return cost(spec).macs


@dataclass(frozen=True)
class ParamCount:
    total: int
    weights: int
    biases: int
    affine: int
    without_hidden_linear_biases: int
    per_layer: dict


def param_count(spec: ArchitectureSpec) -> ParamCount:
    """Count weights, biases and norm affine parameters.

    ``without_hidden_linear_biases`` drops the biases of every Linear layer
    except the last, the convention under which BraggNN has 45,274 parameters.
    """
    rows = list(_ops(spec))
    per_layer = {}
    for name, op, _, w, b, aff in rows:
        if op == "AttentionMatmul":
            continue
        per_layer[name] = {"op": op, "weights": w, "biases": b, "affine": aff}
    linear_bias = [b for _, op, _, _, b, _ in rows if op == "Linear"]
    hidden_bias = sum(linear_bias[:-1])
    weights = sum(r["weights"] for r in per_layer.values())
    biases = sum(r["biases"] for r in per_layer.values())
    affine = sum(r["affine"] for r in per_layer.values())
    total = weights + biases + affine
    return ParamCount(total, weights, biases, affine, total - hidden_bias, per_layer)


def network_sparsity(network):
    """Per-layer weight sparsity read from a network's prune masks."""
    out = {}
    for name, layer in network.weighted_layers().items():
        if layer.mask is not None:
            out[name] = 1.0 - float(layer.mask.sum()) / layer.mask.size
    return out
