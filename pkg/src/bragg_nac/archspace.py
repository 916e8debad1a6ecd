"""Hierarchical architecture search space.

A genome is a fixed-length encoding: a 3x3 stem conv, exactly three block
slots (each a Conv block, an attention block, or an empty placeholder) and a
four-layer MLP head whose last layer always emits the two center coordinates.
Decoding resolves every shape for an 11x11 single-channel patch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine.network import INPUT_SHAPE, LayerSpec, Network

CHANNELS = (1, 2, 4, 8, 16, 32, 64)
KERNELS = (1, 3)
NORMS = ("Batch", "Layer", None)
ACTIVATIONS = ("ReLU", "GELU", "LeakyReLU", None)
LINEAR_DIMS = (4, 8, 16, 32, 64)
BLOCK_KINDS = ("Conv", "Attention", "None")
STEM_KERNEL = 3
OUTPUT_DIM = 2
N_BLOCKS = 3
N_MLP_LAYERS = 4
MAX_RESAMPLE = 100


class InvalidGenome(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ConvGene:
    out1: int
    k1: int
    norm1: str | None
    act1: str | None
    in2: int
    out2: int
    k2: int
    norm2: str | None
    act2: str | None


@dataclass(frozen=True)
class AttentionGene:
    qkv_dim: int
    skip_act: str | None


@dataclass(frozen=True)
class BlockGene:
    kind: str
    conv: ConvGene | None = None
    attention: AttentionGene | None = None


@dataclass(frozen=True)
class MlpLayerGene:
    out_dim: int | None  # None on the final layer, which is fixed to 2 outputs
    norm: str | None
    act: str | None


@dataclass(frozen=True)
class Genome:
    stem: int
    blocks: tuple
    mlp: tuple

    # serialization ---------------------------------------------------------
    def to_dict(self):
        blocks = []
        for b in self.blocks:
            d = {"kind": b.kind}
            if b.conv is not None:
                d["conv"] = _gene_dict(b.conv)
            if b.attention is not None:
                d["attention"] = _gene_dict(b.attention)
            blocks.append(d)
        return {"stem": self.stem, "blocks": blocks,
                "mlp": [_gene_dict(layer) for layer in self.mlp]}

    @classmethod
    def from_dict(cls, d):
        blocks = []
        for b in d["blocks"]:
            blocks.append(BlockGene(
                kind=b["kind"],
                conv=ConvGene(**b["conv"]) if b.get("conv") else None,
                attention=AttentionGene(**b["attention"]) if b.get("attention") else None,
            ))
        mlp = tuple(MlpLayerGene(**layer) for layer in d["mlp"])
        return cls(stem=d["stem"], blocks=tuple(blocks), mlp=mlp)

    def key(self):
        """Compact canonical single-line form, used for memoization and logs."""
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


def _gene_dict(gene):
    return {f: getattr(gene, f) for f in gene.__dataclass_fields__}


# ---------------------------------------------------------------------------
# shape arithmetic

@dataclass
class ArchitectureSpec:
    """Concrete layer list with every intermediate shape resolved."""

    layers: list
    shapes: list
    input_shape: tuple = INPUT_SHAPE
    groups: list = field(default_factory=list)

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def flatten_dim(self):
        for spec, shape in zip(self.layers, self.shapes[1:]):
            if spec.kind == "Flatten":
                return shape[0]
        return None

    def in_shape(self, index):
        return self.shapes[index]

    def build(self, seed=0, zero_init=False):
        rng = None if zero_init else np.random.default_rng(seed)
        return Network.from_specs(self.layers, self.input_shape, rng)

    def describe(self):
        return [_describe(s) for s in self.layers]

    def listing(self):
        """Layer sequence in the Appendix-listing style, attention expanded."""
        out = []
        for s in self.layers:
            if s.kind == "ConvAttention":
                c, d = s.args["channels"], s.args["qkv_dim"]
                out += [f"Conv2d({c}, {d}, 1x1, 1)"] * 3
                out += ["Softmax()", f"Conv2d({d}, {c}, 1x1, 1)"]
                if s.args.get("activation"):
                    out.append(f"{s.args['activation']}()")
            else:
                out.append(_describe(s))
        return out

    def __add__(self, other):
        return resolve(self.layers + other.layers, self.input_shape)


def _describe(s):
    a = s.args
    if s.kind == "Conv2d":
        k = a["kernel_size"]
        return f"Conv2d({a['in_channels']}, {a['out_channels']}, {k}x{k}, 1)"
    if s.kind == "Linear":
        return f"Linear({a['in_features']}, {a['out_features']})"
    if s.kind == "BatchNorm2d":
        return f"BatchNorm2d({a['num_features']})"
    if s.kind == "LayerNorm":
        shape = tuple(a["normalized_shape"])
        inner = f"{shape[0]}," if len(shape) == 1 else ", ".join(map(str, shape))
        return f"LayerNorm(({inner}))"
    if s.kind == "ConvAttention":
        return f"ConvAttention({a['channels']}, {a['qkv_dim']}, {a.get('activation')})"
    return f"{s.kind}()"


def layer_output_shape(spec, shape):
    """Pure shape arithmetic for one layer; raises ValueError when impossible."""
    a = spec.args
    k = spec.kind
    if k == "Conv2d":
        if len(shape) != 3 or shape[0] != a["in_channels"]:
            raise ValueError(f"Conv2d expects ({a['in_channels']}, H, W), got {shape}")
        ks = a["kernel_size"]
        h, w = shape[1] - ks + 1, shape[2] - ks + 1
        if h < 1 or w < 1:
            raise ValueError(f"{ks}x{ks} conv shrinks spatial size {shape[1]} to {h}")
        return (a["out_channels"], h, w)
    if k == "Linear":
        if tuple(shape) != (a["in_features"],):
            raise ValueError(f"Linear expects ({a['in_features']},), got {shape}")
        return (a["out_features"],)
    if k == "Flatten":
        return (math.prod(shape),)
    if k == "BatchNorm2d" and shape[0] != a["num_features"]:
        raise ValueError(f"BatchNorm2d({a['num_features']}) got {shape}")
    if k == "LayerNorm" and tuple(a["normalized_shape"]) != tuple(shape):
        raise ValueError(f"LayerNorm{tuple(a['normalized_shape'])} got {shape}")
    if k == "ConvAttention" and (len(shape) != 3 or shape[0] != a["channels"]):
        raise ValueError(f"ConvAttention({a['channels']}) got {shape}")
    return tuple(shape)


def resolve(layers, input_shape=INPUT_SHAPE, groups=None):
    shapes = [tuple(input_shape)]
    for i, spec in enumerate(layers):
        try:
            shapes.append(layer_output_shape(spec, shapes[-1]))
        except ValueError as exc:
            raise InvalidGenome([f"layer {i} ({_describe(spec)}): {exc}"]) from None
    return ArchitectureSpec(list(layers), shapes, tuple(input_shape), groups or [])


# ---------------------------------------------------------------------------
# validation and decoding

def _check_domain(genome):
    errs = []
    if genome.stem not in CHANNELS:
        errs.append(f"stem channels {genome.stem} not in {CHANNELS}")
    if len(genome.blocks) != N_BLOCKS:
        errs.append(f"expected {N_BLOCKS} block slots, got {len(genome.blocks)}")
    for i, b in enumerate(genome.blocks, 1):
        if b.kind not in BLOCK_KINDS:
            errs.append(f"block {i}: unknown kind {b.kind!r}")
        elif b.kind == "Conv":
            c = b.conv
            if c is None:
                errs.append(f"block {i}: Conv block without conv payload")
                continue
            for name in ("out1", "in2", "out2"):
                if getattr(c, name) not in CHANNELS:
                    errs.append(f"block {i}: {name}={getattr(c, name)} not in {CHANNELS}")
            for name in ("k1", "k2"):
                if getattr(c, name) not in KERNELS:
                    errs.append(f"block {i}: {name}={getattr(c, name)} not in {KERNELS}")
            for name in ("norm1", "norm2"):
                if getattr(c, name) not in NORMS:
                    errs.append(f"block {i}: {name}={getattr(c, name)!r} not in {NORMS}")
            for name in ("act1", "act2"):
                if getattr(c, name) not in ACTIVATIONS:
                    errs.append(f"block {i}: {name}={getattr(c, name)!r} not in {ACTIVATIONS}")
            if c.in2 != c.out1:
                errs.append(f"block {i}: conv2 in channels {c.in2} != conv1 out channels {c.out1}")
        elif b.kind == "Attention":
            a = b.attention
            if a is None:
                errs.append(f"block {i}: Attention block without attention payload")
                continue
            if a.qkv_dim not in CHANNELS:
                errs.append(f"block {i}: qkv_dim={a.qkv_dim} not in {CHANNELS}")
            if a.skip_act not in ACTIVATIONS:
                errs.append(f"block {i}: skip_act={a.skip_act!r} not in {ACTIVATIONS}")
    if len(genome.mlp) != N_MLP_LAYERS:
        errs.append(f"expected {N_MLP_LAYERS} MLP layers, got {len(genome.mlp)}")
    for i, layer in enumerate(genome.mlp, 1):
        final = i == N_MLP_LAYERS
        if final and layer.out_dim is not None:
            errs.append(f"mlp layer {i}: output dimension is fixed to {OUTPUT_DIM}")
        if not final and layer.out_dim not in LINEAR_DIMS:
            errs.append(f"mlp layer {i}: out_dim={layer.out_dim} not in {LINEAR_DIMS}")
        if layer.norm not in NORMS:
            errs.append(f"mlp layer {i}: norm={layer.norm!r} not in {NORMS}")
        if layer.act not in ACTIVATIONS:
            errs.append(f"mlp layer {i}: act={layer.act!r} not in {ACTIVATIONS}")
    return errs


def spatial_trace(genome, size=INPUT_SHAPE[1]):
    """Spatial size after the stem and after every conv, with a label per step."""
    trace = []
    size -= STEM_KERNEL - 1
    trace.append(("stem", size))
    for i, b in enumerate(genome.blocks, 1):
        if b.kind == "Conv" and b.conv is not None:
            for j, k in ((1, b.conv.k1), (2, b.conv.k2)):
                size -= k - 1
                trace.append((f"block {i} conv{j} ({k}x{k})", size))
    return trace


def validate(genome):
    """Return the list of violations; an empty list means decodable."""
    errs = _check_domain(genome)
    for label, size in spatial_trace(genome):
        if size < 1:
            errs.append(f"{label} shrinks spatial size to {size}")
            break
    return errs


def is_valid(genome):
    return not validate(genome)


def _norm_spec(norm, shape):
    if norm == "Batch":
        return LayerSpec("BatchNorm2d", {"num_features": shape[0]})
    if norm == "Layer":
        return LayerSpec("LayerNorm", {"normalized_shape": tuple(shape)})
    return None


def decode(genome):
    """Decode a genome to an :class:`ArchitectureSpec` (raises InvalidGenome)."""
    errs = validate(genome)
    if errs:
        raise InvalidGenome(errs)
    layers, groups = [], []
    c, h = INPUT_SHAPE[0], INPUT_SHAPE[1]

    def add(spec, group):
        layers.append(spec)
        groups.append(group)

    add(LayerSpec("Conv2d", {"in_channels": c, "out_channels": genome.stem,
                             "kernel_size": STEM_KERNEL}), "stem")
    c, h = genome.stem, h - STEM_KERNEL + 1
    for i, b in enumerate(genome.blocks, 1):
        group = f"block{i}"
        if b.kind == "Conv":
            g = b.conv
            for out, k, norm, act in ((g.out1, g.k1, g.norm1, g.act1),
                                      (g.out2, g.k2, g.norm2, g.act2)):
                add(LayerSpec("Conv2d", {"in_channels": c, "out_channels": out,
                                         "kernel_size": k}), group)
                c, h = out, h - k + 1
                norm_spec = _norm_spec(norm, (c, h, h))
                if norm_spec is not None:
                    add(norm_spec, group)
                if act is not None:
                    add(LayerSpec(act), group)
        elif b.kind == "Attention":
            add(LayerSpec("ConvAttention", {"channels": c, "qkv_dim": b.attention.qkv_dim,
                                            "activation": b.attention.skip_act}), group)
    add(LayerSpec("Flatten"), "mlp")
    features = c * h * h
    for layer in genome.mlp:
        out = OUTPUT_DIM if layer.out_dim is None else layer.out_dim
        add(LayerSpec("Linear", {"in_features": features, "out_features": out}), "mlp")
        features = out
        norm_spec = _norm_spec(layer.norm, (out,))
        if norm_spec is not None:
            add(norm_spec, "mlp")
        if layer.act is not None:
            add(LayerSpec(layer.act), "mlp")
    return resolve(layers, INPUT_SHAPE, groups)


def decode_and_build(genome, seed=0):
    return decode(genome).build(seed)


# ---------------------------------------------------------------------------
# sampling and variation

def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def sample_conv_gene(rng):
    out1 = _pick(rng, CHANNELS)
    return ConvGene(out1=out1, k1=_pick(rng, KERNELS), norm1=_pick(rng, NORMS),
                    act1=_pick(rng, ACTIVATIONS), in2=out1, out2=_pick(rng, CHANNELS),
                    k2=_pick(rng, KERNELS), norm2=_pick(rng, NORMS),
                    act2=_pick(rng, ACTIVATIONS))


def sample_attention_gene(rng):
    return AttentionGene(qkv_dim=_pick(rng, CHANNELS), skip_act=_pick(rng, ACTIVATIONS))


def sample_block(rng, kind=None):
    kind = kind or _pick(rng, BLOCK_KINDS)
    if kind == "Conv":
        return BlockGene("Conv", conv=sample_conv_gene(rng))
    if kind == "Attention":
        return BlockGene("Attention", attention=sample_attention_gene(rng))
    return BlockGene("None")


def sample_mlp(rng):
    layers = [MlpLayerGene(_pick(rng, LINEAR_DIMS), _pick(rng, NORMS), _pick(rng, ACTIVATIONS))
              for _ in range(N_MLP_LAYERS - 1)]
    layers.append(MlpLayerGene(None, _pick(rng, NORMS), _pick(rng, ACTIVATIONS)))
    return tuple(layers)


def sample_genome(rng, block_kinds=None, max_attempts=MAX_RESAMPLE):
    """Sample uniformly at every level of the hierarchy, rejecting invalid genomes.

    ``block_kinds`` pins the kind of each slot (payloads are still sampled).
    """
    kinds = block_kinds or (None,) * N_BLOCKS
    for _ in range(max_attempts):
        g = Genome(stem=_pick(rng, CHANNELS),
                   blocks=tuple(sample_block(rng, k) for k in kinds),
                   mlp=sample_mlp(rng))
        if is_valid(g):
            return g
    raise InvalidGenome([f"no valid genome after {max_attempts} attempts"])


_CONV_LEAVES = {
    "out1": CHANNELS, "k1": KERNELS, "norm1": NORMS, "act1": ACTIVATIONS,
    "out2": CHANNELS, "k2": KERNELS, "norm2": NORMS, "act2": ACTIVATIONS,
}


def _mutate_once(g, rate, rng):
    stem = _pick(rng, CHANNELS) if rng.random() < rate else g.stem
    blocks = []
    for b in g.blocks:
        if rng.random() < rate:
            kind = _pick(rng, BLOCK_KINDS)
            if kind != b.kind:
                blocks.append(sample_block(rng, kind))
                continue
        if b.kind == "Conv":
            changes = {name: _pick(rng, opts) for name, opts in _CONV_LEAVES.items()
                       if rng.random() < rate}
            conv = replace(b.conv, **changes)
            conv = replace(conv, in2=conv.out1)
            blocks.append(replace(b, conv=conv))
        elif b.kind == "Attention":
            a = b.attention
            qkv = _pick(rng, CHANNELS) if rng.random() < rate else a.qkv_dim
            act = _pick(rng, ACTIVATIONS) if rng.random() < rate else a.skip_act
            blocks.append(replace(b, attention=AttentionGene(qkv, act)))
        else:
            blocks.append(b)
    mlp = []
    for layer in g.mlp:
        out = layer.out_dim
        if out is not None and rng.random() < rate:
            out = _pick(rng, LINEAR_DIMS)
        norm = _pick(rng, NORMS) if rng.random() < rate else layer.norm
        act = _pick(rng, ACTIVATIONS) if rng.random() < rate else layer.act
        mlp.append(MlpLayerGene(out, norm, act))
    return Genome(stem, tuple(blocks), tuple(mlp))


def mutate(genome, rate, rng, max_attempts=MAX_RESAMPLE):
    """Resample each leaf gene with probability ``rate``.

    Flipping a block's kind resamples its whole payload. Invalid results are
    retried; if every attempt fails the parent is returned unchanged.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mutation rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return genome
    for _ in range(max_attempts):
        child = _mutate_once(genome, rate, rng)
        if is_valid(child):
            return child
    return genome


def crossover(a, b, rng, max_attempts=MAX_RESAMPLE):
    """Uniform crossover over the five top-level genes (stem, 3 blocks, MLP)."""
    if a == b:
        return a, b
    ga = [a.stem, *a.blocks, a.mlp]
    gb = [b.stem, *b.blocks, b.mlp]
    for _ in range(max_attempts):
        swap = rng.random(len(ga)) < 0.5
        ca = [y if s else x for x, y, s in zip(ga, gb, swap)]
        cb = [x if s else y for x, y, s in zip(ga, gb, swap)]
        c1 = Genome(ca[0], tuple(ca[1:4]), ca[4])
        c2 = Genome(cb[0], tuple(cb[1:4]), cb[4])
        if is_valid(c1) and is_valid(c2):
            return c1, c2
    return a, b


# ---------------------------------------------------------------------------
# cardinality

@dataclass(frozen=True)
class Cardinality:
    conv_block: int
    attention_block: int
    none_block: int
    block_slot: int
    blocks: int
    mlp: int
    stem: int
    total: int
    total_with_stem: int
    conv_block_effective: int


def cardinality():
    """Exact counts of the space as laid out in the parameter table.

    ``conv_block`` counts the conv2 input-channel gene as an independent
    choice, as the table does; ``conv_block_effective`` ties it to conv1's
    output. ``total`` is blocks x MLP; ``total_with_stem`` also multiplies in
    the stem channel choice.
    """
    c, k, n, a = len(CHANNELS), len(KERNELS), len(NORMS), len(ACTIVATIONS)
    conv = (c * k * n * a) * (c * c * k * n * a)
    attention = c * a
    slot = conv + attention + 1
    blocks = slot ** N_BLOCKS
    mlp = (len(LINEAR_DIMS) * n * a) ** (N_MLP_LAYERS - 1) * (n * a)
    return Cardinality(
        conv_block=conv, attention_block=attention, none_block=1, block_slot=slot,
        blocks=blocks, mlp=mlp, stem=c, total=blocks * mlp,
        total_with_stem=c * blocks * mlp, conv_block_effective=conv // c,
    )


# ---------------------------------------------------------------------------
# reference architectures

def nac_base_genome():
    """The searched base model: three conv blocks, norms early, LayerNorm later."""
    return Genome(
        stem=32,
        blocks=(
            BlockGene("Conv", conv=ConvGene(4, 1, None, "ReLU", 4, 32, 1, "Batch", "LeakyReLU")),
            BlockGene("Conv", conv=ConvGene(4, 1, "Batch", "GELU", 4, 32, 3, "Layer", "GELU")),
            BlockGene("Conv", conv=ConvGene(8, 3, "Layer", "GELU", 8, 64, 3, None, None)),
        ),
        mlp=(
            MlpLayerGene(8, "Layer", "ReLU"),
            MlpLayerGene(4, None, "GELU"),
            MlpLayerGene(4, "Layer", "GELU"),
            MlpLayerGene(None, None, None),
        ),
    )


def braggnn_class_genome():
    """Closest in-space relative of BraggNN: attention block then a conv block.

    The original head has five linear layers, one more than the space allows,
    so this genome reproduces the feature extractor exactly and a 4-layer head.
    """
    return Genome(
        stem=64,
        blocks=(
            BlockGene("Attention", attention=AttentionGene(32, "LeakyReLU")),
            BlockGene("Conv", conv=ConvGene(32, 3, None, "LeakyReLU", 32, 8, 3, None, "LeakyReLU")),
            BlockGene("None"),
        ),
        mlp=(
            MlpLayerGene(64, None, "LeakyReLU"),
            MlpLayerGene(32, None, "LeakyReLU"),
            MlpLayerGene(16, None, "LeakyReLU"),
            MlpLayerGene(None, None, None),
        ),
    )


def builtin_nac_base():
    return decode(nac_base_genome())


def builtin_braggnn(hidden_mlp_bias=True):
    """BraggNN as published: stem, attention block, conv block, 5-layer MLP.

    ``hidden_mlp_bias=False`` drops the biases of the four hidden linear layers.
    """
    conv = lambda i, o, k: LayerSpec("Conv2d", {"in_channels": i, "out_channels": o,
                                                "kernel_size": k})
    layers = [
        conv(1, 64, 3),
        LayerSpec("ConvAttention", {"channels": 64, "qkv_dim": 32, "activation": "LeakyReLU"}),
        conv(64, 32, 3), LayerSpec("LeakyReLU"),
        conv(32, 8, 3), LayerSpec("LeakyReLU"),
        LayerSpec("Flatten"),
    ]
    groups = ["stem", "block1", "block2", "block2", "block2", "block2", "mlp"]
    dims = [200, 64, 32, 16, 8, 2]
    for j, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        last = j == len(dims) - 2
        layers.append(LayerSpec("Linear", {"in_features": i, "out_features": o,
                                           "bias": hidden_mlp_bias or last}))
        groups.append("mlp")
        if not last:
            layers.append(LayerSpec("LeakyReLU"))
            groups.append("mlp")
    return resolve(layers, INPUT_SHAPE, groups)


BUILTINS = {"nac_base": builtin_nac_base, "braggnn": builtin_braggnn}
