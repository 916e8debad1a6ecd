"""Central finite-difference gradient checks for single layers."""
from __future__ import annotations

import numpy as np

from . import layers

EPS = 1e-3


def relative_error(analytic, numeric, floor=1e-2):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients sane."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _loss(layer, x, proj):
    out = layer.forward(x, grad=False)
    return float(np.sum(out.astype(np.float64) * proj))


def check_layer(layer, x, rng, n_probes=5, eps=EPS, kink_margin=None):
    """Compare analytic and central-difference gradients of ``sum(proj * layer(x))``.

    Run under ``layers.precision(np.float64)`` for tight tolerances. Probes
    ``n_probes`` random entries of the input and of every parameter.
    Returns a list of ``(target, index, analytic, numeric, rel_error)``.
    ``kink_margin`` skips input probes whose pre-activation lies within the
    margin of a non-differentiable point (used for ReLU-family layers).
    """
    x = np.array(x, dtype=layers.DTYPE)
    out = layer.forward(x, grad=True)
    proj = rng.standard_normal(out.shape)
    for p in layer.params().values():
        p.zero_grad()
    dx = layer.backward(proj.astype(layers.DTYPE))

    targets = []
    if dx is not None:
        targets.append(("input", x, dx))
    for name, p in layer.params().items():
        targets.append((name, p.data, p.grad.copy()))

    results = []
    for name, arr, grad in targets:
        flat = arr.reshape(-1)
        candidates = np.arange(flat.size)
        if kink_margin is not None and name == "input":
            candidates = candidates[np.abs(flat) > kink_margin]
        picks = rng.choice(candidates, size=min(n_probes, candidates.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = _loss(layer, x, proj)
            flat[idx] = orig - eps
            down = _loss(layer, x, proj)
            flat[idx] = orig
            # perturbation actually applied, after float32 rounding
            step = float(layers.DTYPE(orig + eps)) - float(layers.DTYPE(orig - eps))
            numeric = (up - down) / step
            analytic = float(grad.reshape(-1)[idx])
            results.append((name, int(idx), analytic, numeric, relative_error(analytic, numeric)))
    return results


def _batchnorm(rng, training):
    layer = layers.BatchNorm2d(3)
    layer.training = training
    layer.weight.data[:] = rng.uniform(0.5, 1.5, 3)
    layer.bias.data[:] = rng.normal(size=3)
    layer.running_mean[:] = rng.normal(size=3)
    layer.running_var[:] = rng.uniform(0.5, 2.0, 3)
    return layer


def _layernorm(rng, shape):
    layer = layers.LayerNorm(shape)
    layer.weight.data[...] = rng.uniform(0.5, 1.5, layer.weight.data.shape)
    layer.bias.data[...] = rng.normal(size=layer.bias.data.shape)
    return layer


# name -> (factory(rng), NHWC or 2-D input shape, kink margin)
VARIANTS = {
    "Conv2d 3x3": (lambda r: layers.Conv2d(3, 4, 3, rng=r), (2, 6, 6, 3), None),
    "Conv2d 3x3 wide-in": (lambda r: layers.Conv2d(8, 2, 3, rng=r), (2, 6, 6, 8), None),
    "Conv2d 1x1": (lambda r: layers.Conv2d(3, 4, 1, rng=r), (2, 5, 5, 3), None),
    "Linear": (lambda r: layers.Linear(7, 5, rng=r), (3, 7), None),
    "BatchNorm2d train": (lambda r: _batchnorm(r, True), (4, 3, 3, 3), None),
    "BatchNorm2d eval": (lambda r: _batchnorm(r, False), (4, 3, 3, 3), None),
    "BatchNorm2d features": (lambda r: _batchnorm(r, True), (6, 3), None),
    "LayerNorm spatial": (lambda r: _layernorm(r, (3, 4, 4)), (2, 4, 4, 3), None),
    "LayerNorm features": (lambda r: _layernorm(r, (5,)), (3, 5), None),
    "ReLU": (lambda r: layers.ReLU(), (2, 4, 4, 3), 0.01),
    "GELU": (lambda r: layers.GELU(), (2, 4, 4, 3), None),
    "LeakyReLU": (lambda r: layers.LeakyReLU(), (2, 4, 4, 3), 0.01),
    "Softmax": (lambda r: layers.Softmax(), (3, 6), None),
    "Flatten": (lambda r: layers.Flatten(), (2, 3, 3, 2), None),
    "ConvAttention GELU": (lambda r: layers.ConvAttention(4, 3, "GELU", rng=r), (2, 3, 3, 4), None),
    "ConvAttention plain": (lambda r: layers.ConvAttention(4, 2, None, rng=r), (2, 3, 3, 4), None),
}


def run_suite(n_probes=100, seed=0, variants=None):
    """Worst relative error per variant over at least ``n_probes`` probes each.

    Fresh random instances are drawn until enough probes accumulate; runs in
    float64 so the central difference is not swamped by rounding.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with layers.precision(np.float64):
        for name in variants or VARIANTS:
            factory, shape, kink = VARIANTS[name]
            results = []
            while len(results) < n_probes:
                layer = factory(rng)
                x = rng.normal(size=shape)
                results.extend(check_layer(layer, x, rng, n_probes=5, kink_margin=kink))
            worst = max(results, key=lambda r: r[4])
            out[name] = {"probes": len(results), "worst": worst[4], "at": worst[:2]}
    return out
