"""Layer implementations with explicit forward and backward passes.

Activations flow between layers as float32 arrays in NHWC layout (channels
last) so elementwise work stays contiguous; shapes reported by
``output_shape`` are logical (C, H, W) tuples and parameters keep the usual
(out, in, kh, kw) / (C, H, W) layouts. :class:`~.network.Network` converts
NCHW input at the boundary. Convolutions are stride 1 with no padding.
Every layer caches what its backward pass needs during a forward call made
with ``grad=True``.
"""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DTYPE = np.float32
LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def precision(dtype):
    """Temporarily build and run layers in another float type (gradient checks)."""
    global DTYPE
    old, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = old


class ShapeError(ValueError):
    """Raised when a layer cannot accept the shape it is given."""


class BackwardError(RuntimeError):
    """Raised when backward is called without a cached forward pass."""


class Param:
    """A trainable array together with its gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param(shape={self.data.shape})"


def fake_quantize(w, bits):
    """Symmetric per-tensor uniform quantization with max-abs scaling.

    Returns ``(quantized, scale)``. ``bits`` of 32 or None passes ``w``
    through untouched with scale 1. Rounding is half away from zero.
    """
    if bits is None or bits >= 32:
        return w, 1.0
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    scaled = w / DTYPE(scale)
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    q = np.clip(q, -qmax, qmax)
    return (q * DTYPE(scale)).astype(DTYPE), scale


class Layer:
    """Base class. Subclasses set ``kind`` and implement the three hooks."""

    kind = "Layer"

    def __init__(self):
        self.training = False
        self.needs_input_grad = True
        self._cache = None

    def params(self):
        """Mapping of local parameter name to :class:`Param`."""
        return {}

    def buffers(self):
        """Non-trainable state that must be checkpointed."""
        return {}

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, grad=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache

    def describe(self):
        return f"{self.kind}()"

    def __repr__(self):
        return self.describe()


class _WeightedLayer(Layer):
    """Layer whose ``weight`` can be pruned with a mask and fake-quantized.

    The forward pass uses ``effective_weight()``; gradients w.r.t. the latent
    weight follow the straight-through estimator and are zeroed under the mask.
    """

    def __init__(self):
        super().__init__()
        self.mask = None
        self.quant_bits = None

    def effective_weight(self):
        w = self.weight.data
        if self.mask is not None:
            w = w * self.mask
        w, _ = fake_quantize(w, self.quant_bits)
        return w

    def _latent_grad(self, g):
        if self.mask is not None:
            g = g * self.mask
        return g


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2d(_WeightedLayer):
    kind = "Conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, bias=True, rng=None):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        w = kaiming_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_channels, DTYPE)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"Conv2d expects (C, H, W), got {shape}")
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"Conv2d expects {self.in_channels} channels, got {c}")
        k = self.kernel_size
        if h - k + 1 < 1 or w - k + 1 < 1:
            raise ShapeError(f"Conv2d {k}x{k} shrinks spatial size {h}x{w} below 1")
        return (self.out_channels, h - k + 1, w - k + 1)

    def _wmat(self, weff):
        # column order (kh, kw, C) matches NHWC patches
        return weff.transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def forward(self, x, grad=False):
        b, h, w, c = x.shape
        k = self.kernel_size
        ho, wo = h - k + 1, w - k + 1
        weff = self.effective_weight()
        o = self.out_channels
        if k == 3 and h * w * o < ho * wo * c:
            # project every input pixel through all 9 taps, then shift-add
            wall = weff.transpose(1, 2, 3, 0).reshape(c, k * k * o)
            full = (x.reshape(-1, c) @ wall).reshape(b, h, w, k, k, o)
            out = np.zeros((b, ho, wo, o), DTYPE)
            for i in range(k):
                for j in range(k):
                    out += full[:, i:i + ho, j:j + wo, i, j, :]
            if self.bias is not None:
                out += self.bias.data
            if grad:
                self._cache = ("shift", x, wall)
            return out
        wmat = self._wmat(weff)
        if k == 1:
            cols = x.reshape(-1, c)
        else:
            cols = np.empty((b, ho, wo, k, k, c), DTYPE)
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = x[:, i:i + ho, j:j + wo, :]
            cols = cols.reshape(-1, k * k * c)
        out = cols @ wmat.T
        if self.bias is not None:
            out += self.bias.data
        if grad:
            self._cache = ("cols", cols, wmat, x.shape)
        return out.reshape(b, ho, wo, o)

    def backward(self, dy):
        cache = self._pop_cache()
        k, o = self.kernel_size, self.out_channels
        if self.bias is not None:
            self.bias.grad += dy.reshape(-1, o).sum(axis=0)
        if cache[0] == "shift":
            _, x, wall = cache
            b, h, w, c = x.shape
            ho, wo = h - k + 1, w - k + 1
            dfull = np.zeros((b, h, w, k, k, o), DTYPE)
            for i in range(k):
                for j in range(k):
                    dfull[:, i:i + ho, j:j + wo, i, j, :] = dy
            dfull = dfull.reshape(-1, k * k * o)
            gw = (x.reshape(-1, c).T @ dfull).reshape(c, k, k, o).transpose(3, 0, 1, 2)
            self.weight.grad += self._latent_grad(gw)
            if not self.needs_input_grad:
                return None
            return (dfull @ wall.T).reshape(b, h, w, c)
        _, cols, wmat, xshape = cache
        b, h, w, c = xshape
        ho, wo = h - k + 1, w - k + 1
        d2 = dy.reshape(-1, o)
        gw = (d2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        self.weight.grad += self._latent_grad(gw)
        if not self.needs_input_grad:
            return None
        dcols = d2 @ wmat
        if k == 1:
            return dcols.reshape(b, h, w, c)
        dcols = dcols.reshape(b, ho, wo, k, k, c)
        dx = np.zeros(xshape, DTYPE)
        for i in range(k):
            for j in range(k):
                dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        return dx

    def describe(self):
        k = self.kernel_size
        return f"Conv2d({self.in_channels}, {self.out_channels}, {k}x{k}, 1)"


class Linear(_WeightedLayer):
    kind = "Linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        w = kaiming_uniform(rng, shape, in_features) if rng is not None else np.zeros(shape, DTYPE)
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_features, DTYPE)) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"Linear expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x, grad=False):
        weff = self.effective_weight()
        out = x @ weff.T
        if self.bias is not None:
            out += self.bias.data
        if grad:
            self._cache = (x, weff)
        return out

    def backward(self, dy):
        x, weff = self._pop_cache()
        self.weight.grad += self._latent_grad(dy.T @ x)
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=0)
        if not self.needs_input_grad:
            return None
        return dy @ weff

    def describe(self):
        return f"Linear({self.in_features}, {self.out_features})"


class BatchNorm2d(Layer):
    """Batch normalization over the channel (last) axis.

    Accepts image activations or (B, C) features; the latter is used when a
    batch-norm gene lands inside the MLP head.
    """

    kind = "BatchNorm2d"

    def __init__(self, num_features, momentum=BN_MOMENTUM, eps=NORM_EPS):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.weight = Param(np.ones(num_features, DTYPE))
        self.bias = Param(np.zeros(num_features, DTYPE))
        self.running_mean = np.zeros(num_features, DTYPE)
        self.running_var = np.ones(num_features, DTYPE)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, shape):
        if len(shape) not in (1, 3) or shape[0] != self.num_features:
            raise ShapeError(f"BatchNorm2d expects {self.num_features} channels, got {shape}")
        return tuple(shape)

    def forward(self, x, grad=False):
        x2 = x.reshape(-1, self.num_features)
        n = x2.shape[0]
        if self.training:
            ones = np.ones(n, DTYPE)
            mean = (ones @ x2) / n
            xc = x2 - mean
            var = (ones @ (xc * xc)) / n
            m = self.momentum
            self.running_mean[:] = (1 - m) * self.running_mean + m * mean
            self.running_var[:] = (1 - m) * self.running_var + m * var * (n / max(n - 1, 1))
        else:
            xc = x2 - self.running_mean
            var = self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(DTYPE)
        xhat = xc * inv
        if grad:
            self._cache = (xhat, inv, self.training, x.shape)
        return (xhat * self.weight.data + self.bias.data).reshape(x.shape)

    def backward(self, dy):
        xhat, inv, training, shape = self._pop_cache()
        dy2 = dy.reshape(-1, self.num_features)
        ones = np.ones(dy2.shape[0], DTYPE)
        gb = ones @ dy2
        gw = ones @ (dy2 * xhat)
        self.weight.grad += gw
        self.bias.grad += gb
        w = self.weight.data
        if not training:
            return (dy2 * (w * inv)).reshape(shape)
        n = dy2.shape[0]
        # d/dx of affine(normalize(x)) with batch statistics
        dx = (w * inv / n) * (n * dy2 - gb - xhat * gw)
        return dx.reshape(shape)

    def describe(self):
        return f"BatchNorm2d({self.num_features})"


class LayerNorm(Layer):
    """Normalizes over the trailing ``normalized_shape`` dims, elementwise affine."""

    kind = "LayerNorm"

    def __init__(self, normalized_shape, eps=NORM_EPS):
        super().__init__()
        self.normalized_shape = tuple(int(s) for s in normalized_shape)
        self.eps = eps
        self.weight = Param(np.ones(self.normalized_shape, DTYPE))
        self.bias = Param(np.zeros(self.normalized_shape, DTYPE))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape):
        if tuple(shape) != self.normalized_shape:
            raise ShapeError(f"LayerNorm{self.normalized_shape} got {tuple(shape)}")
        return tuple(shape)

    def _affine(self):
        w, b = self.weight.data, self.bias.data
        if w.ndim == 3:  # (C, H, W) parameters applied to NHWC activations
            return w.transpose(1, 2, 0), b.transpose(1, 2, 0)
        return w, b

    def forward(self, x, grad=False):
        m = math.prod(self.normalized_shape)
        x2 = x.reshape(-1, m)
        ones = np.ones(m, DTYPE)
        mean = (x2 @ ones) / m
        xc = x2 - mean[:, None]
        var = ((xc * xc) @ ones) / m
        inv = (1.0 / np.sqrt(var + self.eps)).astype(DTYPE)[:, None]
        xhat = xc * inv
        if grad:
            self._cache = (xhat, inv, x.shape)
        w, b = self._affine()
        return (xhat * w.reshape(-1) + b.reshape(-1)).reshape(x.shape)

    def backward(self, dy):
        xhat, inv, shape = self._pop_cache()
        m = xhat.shape[1]
        dy2 = dy.reshape(-1, m)
        w, _ = self._affine()
        lead = np.ones(dy2.shape[0], DTYPE)
        gw = (lead @ (dy2 * xhat)).reshape(w.shape)
        gb = (lead @ dy2).reshape(w.shape)
        if gw.ndim == 3:
            gw, gb = gw.transpose(2, 0, 1), gb.transpose(2, 0, 1)
        self.weight.grad += gw
        self.bias.grad += gb
        dxhat = dy2 * w.reshape(-1)
        ones = np.ones(m, DTYPE)
        s1 = (dxhat @ ones)[:, None]
        s2 = ((dxhat * xhat) @ ones)[:, None]
        return ((inv / m) * (m * dxhat - s1 - xhat * s2)).reshape(shape)

    def describe(self):
        shape = self.normalized_shape
        inner = f"{shape[0]}," if len(shape) == 1 else ", ".join(map(str, shape))
        return f"LayerNorm(({inner}))"


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, grad=False):
        if grad:
            self._cache = (x > 0).astype(DTYPE)
        return np.maximum(x, 0)

    def backward(self, dy):
        return dy * self._pop_cache()


class LeakyReLU(Layer):
    kind = "LeakyReLU"
    negative_slope = LEAKY_SLOPE

    def forward(self, x, grad=False):
        slope = DTYPE(self.negative_slope)
        if grad:
            # local derivative: 1 where x > 0, slope elsewhere
            self._cache = (x > 0) * (1 - slope) + slope
        return np.maximum(x, 0) + slope * np.minimum(x, 0)

    def backward(self, dy):
        return dy * self._pop_cache()


class GELU(Layer):
    """Exact GELU, x * Phi(x)."""

    kind = "GELU"

    def forward(self, x, grad=False):
        cdf = 0.5 * (1.0 + erf(x / DTYPE(_SQRT2)))
        if grad:
            self._cache = (x, cdf)
        return (x * cdf).astype(DTYPE, copy=False)

    def backward(self, dy):
        x, cdf = self._pop_cache()
        pdf = DTYPE(_INV_SQRT_2PI) * np.exp(-0.5 * x * x)
        return dy * (cdf + x * pdf)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(s, dy, axis=-1):
    return s * (dy - (dy * s).sum(axis=axis, keepdims=True))


class Softmax(Layer):
    kind = "Softmax"

    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, x, grad=False):
        s = softmax(x, self.axis)
        if grad:
            self._cache = s
        return s

    def backward(self, dy):
        return softmax_backward(self._pop_cache(), dy, self.axis)


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, shape):
        return (math.prod(shape),)

    def forward(self, x, grad=False):
        if grad:
            self._cache = x.shape
        if x.ndim == 4:  # flatten in (C, H, W) order
            x = x.transpose(0, 3, 1, 2)
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        shape = self._pop_cache()
        if len(shape) == 4:
            b, h, w, c = shape
            return dy.reshape(b, c, h, w).transpose(0, 2, 3, 1)
        return dy.reshape(shape)


ACTIVATIONS = {"ReLU": ReLU, "GELU": GELU, "LeakyReLU": LeakyReLU}


class ConvAttention(Layer):
    """Non-local attention over spatial positions with a residual connection.

    Q, K and V are 1x1 convolutions C -> d; the H*W positions are tokens;
    ``softmax(Q^T K)`` mixes V; a 1x1 projection maps d -> C, the block input
    is added back and the skip activation (if any) is applied.
    """

    kind = "ConvAttention"

    def __init__(self, channels, qkv_dim, activation=None, rng=None):
        super().__init__()
        self.channels = channels
        self.qkv_dim = qkv_dim
        self.activation_name = activation
        self.q = Conv2d(channels, qkv_dim, 1, rng=rng)
        self.k = Conv2d(channels, qkv_dim, 1, rng=rng)
        self.v = Conv2d(channels, qkv_dim, 1, rng=rng)
        self.proj = Conv2d(qkv_dim, channels, 1, rng=rng)
        self.act = ACTIVATIONS[activation]() if activation else None
        self.last_attention = None

    def sublayers(self):
        return {"q": self.q, "k": self.k, "v": self.v, "proj": self.proj}

    def params(self):
        return {f"{name}.{p}": param
                for name, layer in self.sublayers().items()
                for p, param in layer.params().items()}

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            raise ShapeError(f"ConvAttention expects ({self.channels}, H, W), got {shape}")
        return tuple(shape)

    def forward(self, x, grad=False):
        b, h, w, c = x.shape
        t = h * w
        q = self.q.forward(x, grad).reshape(b, t, self.qkv_dim)
        k = self.k.forward(x, grad).reshape(b, t, self.qkv_dim)
        v = self.v.forward(x, grad).reshape(b, t, self.qkv_dim)
        attn = softmax(q @ k.transpose(0, 2, 1), axis=-1)  # rows: queries
        self.last_attention = attn
        y = (attn @ v).reshape(b, h, w, self.qkv_dim)
        z = self.proj.forward(y, grad) + x
        if self.act is not None:
            z = self.act.forward(z, grad)
        if grad:
            self._cache = (q, k, v, attn, x.shape)
        return z

    def backward(self, dy):
        q, k, v, attn, xshape = self._pop_cache()
        b, h, w, c = xshape
        t = h * w
        if self.act is not None:
            dy = self.act.backward(dy)
        dx = dy.copy()
        self.proj.needs_input_grad = True
        dyv = self.proj.backward(dy).reshape(b, t, self.qkv_dim)
        dv = attn.transpose(0, 2, 1) @ dyv
        ds = softmax_backward(attn, dyv @ v.transpose(0, 2, 1), axis=-1)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        for layer, g in ((self.q, dq), (self.k, dk), (self.v, dv)):
            layer.needs_input_grad = self.needs_input_grad
            gx = layer.backward(g.reshape(b, h, w, self.qkv_dim))
            if gx is not None:
                dx += gx
        return dx if self.needs_input_grad else None

    def describe(self):
        act = self.activation_name or "None"
        return f"ConvAttention({self.channels}, {self.qkv_dim}, {act})"
