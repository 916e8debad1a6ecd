"""Quantization-aware fine-tuning combined with iterative magnitude pruning."""
from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .costmodel import QuantSparsityConfig, cost, network_sparsity
from .engine.layers import fake_quantize
from .engine.training import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

ALLOWED_BITS = (4, 5, 6, 7, 8, 32)
PRUNE_FRACTION = 0.2
TRAJECTORY_COLUMNS = ("iteration", "sparsity", "bits", "mean_distance_px", "mbops")

__all__ = [
    "ALLOWED_BITS", "CompressConfig", "CompressionTrajectory", "MaskViolation",
    "apply_quantization", "ensure_masks", "fake_quantize", "global_magnitude_prune",
    "global_sparsity", "iterative_compress", "layer_magnitude_prune", "layer_targets",
    "bits_sweep", "write_trajectory_csv",
]


class MaskViolation(AssertionError):
    """A pruned weight became non-zero during fine-tuning."""


def ensure_masks(network):
    layers = network.weighted_layers()
    for layer in layers.values():
        if layer.mask is None:
            layer.mask = np.ones(layer.weight.data.shape, dtype=np.uint8)
    return layers


def global_sparsity(network):
    """Fraction of zeros over all maskable weights (layers without a mask are dense)."""
    total = zeros = 0
    for layer in network.weighted_layers().values():
        total += layer.weight.data.size
        if layer.mask is not None:
            zeros += layer.mask.size - int(layer.mask.sum())
    return zeros / total if total else 0.0


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def global_magnitude_prune(network, fraction=PRUNE_FRACTION, count=None):
    """Mask the smallest-magnitude unmasked weights across every maskable layer.

    ``count`` overrides ``round(fraction * remaining)``. Ties are broken by
    layer order, then flat index. Masked weights are also zeroed in place so
    the latent parameters agree with the mask. Returns the number pruned.
    """
    if count is None and not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    layers = list(ensure_masks(network).values())
    mags, layer_ids, flat_ids = [], [], []
    for li, layer in enumerate(layers):
        alive = np.flatnonzero(layer.mask.reshape(-1))
        mags.append(np.abs(layer.weight.data.reshape(-1)[alive]))
        layer_ids.append(np.full(alive.size, li))
        flat_ids.append(alive)
    mags = np.concatenate(mags)
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    remaining = mags.size
    k = _round_half_up(fraction * remaining) if count is None else int(count)
    k = min(max(k, 0), remaining)
    if k == 0:
        return 0
    order = np.lexsort((flat_ids, layer_ids, mags))[:k]
    for li, layer in enumerate(layers):
        picked = flat_ids[order[layer_ids[order] == li]]
        if picked.size:
            layer.mask.reshape(-1)[picked] = 0
            layer.weight.data.reshape(-1)[picked] = 0.0
    return k


def layer_magnitude_prune(network, counts):
    """Mask the ``counts[name]`` smallest-magnitude unmasked weights of each layer.

    Ties are broken by flat index. Returns the total number pruned.
    """
    layers = ensure_masks(network)
    pruned = 0
    for name, k in counts.items():
        layer = layers[name]
        alive = np.flatnonzero(layer.mask.reshape(-1))
        k = min(max(int(k), 0), alive.size)
        if k == 0:
            continue
        mags = np.abs(layer.weight.data.reshape(-1)[alive])
        picked = alive[np.lexsort((alive, mags))[:k]]
        layer.mask.reshape(-1)[picked] = 0
        layer.weight.data.reshape(-1)[picked] = 0.0
        pruned += k
    return pruned


def layer_targets(sizes, keep, min_size=0):
    """Per-layer survivor counts summing to ``round(keep * total)``.

    Layers with fewer than ``min_size`` weights stay dense; every other layer
    keeps the same fraction, chosen so the network-wide count matches the
    global schedule exactly (largest-remainder rounding).
    """
    names = list(sizes)
    goal = _round_half_up(keep * sum(sizes.values()))
    small = {n for n in names if sizes[n] < min_size}
    fixed = sum(sizes[n] for n in small)
    pool = sum(sizes[n] for n in names if n not in small)
    ratio = min(max(goal - fixed, 0) / pool, 1.0) if pool else 0.0
    exact = np.array([sizes[n] if n in small else sizes[n] * ratio for n in names])
    base = np.floor(exact).astype(int)
    extra = goal - int(base.sum())
    order = np.lexsort((np.arange(len(names)), -(exact - base)))
    base[order[:max(extra, 0)]] += 1
    return dict(zip(names, base.tolist()))


def apply_quantization(network, bits):
    if bits not in ALLOWED_BITS:
        raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {bits}")
    for layer in network.weighted_layers().values():
        layer.quant_bits = None if bits == 32 else bits


def check_masks(network):
    for name, layer in network.weighted_layers().items():
        if layer.mask is not None and np.any(layer.weight.data[layer.mask == 0] != 0):
            raise MaskViolation(f"pruned weight in layer {name} is non-zero")


@dataclass
class CompressConfig:
    bits: int = 7
    n_iterations: int = 8
    fraction: float = PRUNE_FRACTION
    epochs: int = 30          # fine-tune epochs per iteration
    lr: float = 1e-4          # one tenth of the tuned learning rate
    weight_decay: float = 0.0
    schedule: str = "constant"
    batch_size: int = 256
    seed: int = 0
    scope: str = "layer"      # "layer": 20% of every layer; "global": one threshold
    min_layer_size: int = 64  # layer scope: smaller layers are never pruned

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        if self.min_layer_size < 0:
            raise ValueError("min_layer_size must be >= 0")
        if self.scope not in ("global", "layer"):
            raise ValueError(f"scope must be 'global' or 'layer', got {self.scope!r}")

    def finetune(self, iteration):
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, schedule=self.schedule,
                           epochs=self.epochs, batch_size=self.batch_size,
                           seed=self.seed + iteration)

    def to_dict(self):
        return asdict(self)


@dataclass
class CompressionTrajectory:
    bits: int
    records: list = field(default_factory=list)
    dense: dict | None = None

    @property
    def sparsities(self):
        return [r["sparsity"] for r in self.records]

    @property
    def mbops(self):
        return [r["mbops"] for r in self.records]

    @property
    def final(self):
        return self.records[-1] if self.records else None


def _mbops(spec, network, bits):
    config = QuantSparsityConfig(weight_bits=bits, act_bits=32, sparsity=network_sparsity(network))
    return cost(spec, config).mbops


def iterative_compress(network, spec, train_data, val_data, config=None, on_iteration=None):
    """Prune 20% of the remaining weights, fine-tune with QAT, evaluate; repeat.

    The number of surviving weights after iteration ``n`` is held at
    ``round(N * (1 - fraction) ** n)``, so rounding never accumulates. The
    network is modified in place. A diverging fine-tune records an infinite
    distance for that iteration and ends the run.
    """
    config = config or CompressConfig()
    X, y = train_data
    Xv, yv = val_data
    layers = ensure_masks(network)
    sizes = {name: layer.weight.data.size for name, layer in layers.items()}
    total = sum(sizes.values())
    traj = CompressionTrajectory(bits=config.bits)
    traj.dense = {"iteration": 0, "sparsity": global_sparsity(network), "bits": 32,
                  "mean_distance_px": evaluate(network, Xv, yv).mean_distance,
                  "mbops": _mbops(spec, network, 32)}
    apply_quantization(network, config.bits)

    def guard(net):
        check_masks(net)

    for it in range(1, config.n_iterations + 1):
        keep = (1.0 - config.fraction) ** it
        if config.scope == "layer":
            targets = layer_targets(sizes, keep, config.min_layer_size)
            layer_magnitude_prune(network, {name: int(layers[name].mask.sum()) - targets[name]
                                            for name in layers})
        else:
            alive = sum(int(layer.mask.sum()) for layer in layers.values())
            global_magnitude_prune(network, count=alive - _round_half_up(total * keep))
        result = train(network, X, y, config.finetune(it), on_step=guard)
        distance = float("inf") if result.failed else evaluate(network, Xv, yv).mean_distance
        record = {"iteration": it, "sparsity": global_sparsity(network), "bits": config.bits,
                  "mean_distance_px": distance, "mbops": _mbops(spec, network, config.bits)}
        traj.records.append(record)
        logger.info("compress bits=%d iter=%d sparsity=%.4f dist=%.4f mbops=%.3f",
                    config.bits, it, record["sparsity"], distance, record["mbops"])
        if on_iteration is not None:
            on_iteration(record, network)
        if result.failed:
            break
    return network, traj


def _sweep_one(args):
    network, spec, train_data, val_data, config = args
    net, traj = iterative_compress(network, spec, train_data, val_data, config)
    return net, traj


def bits_sweep(network, spec, train_data, val_data, bits=(4, 5, 6, 7, 8), config=None, workers=1):
    """Independent compression runs from the same dense network, one per bit width."""
    config = config or CompressConfig()
    jobs = [(copy.deepcopy(network), spec, train_data, val_data,
             CompressConfig(**{**config.to_dict(), "bits": b})) for b in bits]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    return {b: r for b, r in zip(bits, results)}


def write_trajectory_csv(path, trajectories):
    """One row per iteration; ``trajectories`` is a trajectory or a list of them."""
    if isinstance(trajectories, CompressionTrajectory):
        trajectories = [trajectories]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for traj in trajectories:
            for r in traj.records:
                writer.writerow([r["iteration"], f"{r['sparsity']:.6f}", r["bits"],
                                 f"{r['mean_distance_px']:.6f}", f"{r['mbops']:.6f}"])
