"""Parameterized layers: linear, layer norm, multi-head attention,
feed-forward block, 3x3 convolution, and 2-D sinusoidal position codes.

Layers expose their parameters as a flat ``{name: Tensor}`` dict so the
optimizer and checkpoints can address them by hierarchical string keys.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


class Layer:
    def params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    @staticmethod
    def _merge(children: dict[str, "Layer"]) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, child in children.items():
            for k, v in child.params().items():
                out[f"{prefix}.{k}"] = v
        return out


class Linear(Layer):
    """Affine map over the last axis: (..., C_in) -> (..., C_out)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 bias_init: float = 0.0):
        limit = float(np.sqrt(6.0 / (c_in + c_out)))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(c_out, c_in)), requires_grad=True)
        self.bias = Tensor(np.full(c_out, bias_init), requires_grad=True)
        self.c_in, self.c_out = c_in, c_out

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        # broadcast-multiply + trailing-axis reduction instead of a GEMM:
        # every row (token) is then reduced in an identical order, which
        # keeps token-permutation equivariance exact downstream
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, 1, self.c_in))
        out = T.reduce_sum(T.mul(flat, self.weight), axes=-1) + self.bias
        return T.reshape(out, (*lead, self.c_out))


class LayerNorm(Layer):
    """Normalize the last axis to zero mean / unit variance, then affine.

    ``enabled=False`` bypasses the layer entirely; closed-form unit tests
    rely on that switch.
    """

    def __init__(self, c: int, eps: float = 1e-6, enabled: bool = True):
        if enabled and c < 2:
            raise ContractError("LayerNorm over a single channel is degenerate; use a bias instead")
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.eps = eps
        self.enabled = enabled
        self.c = c

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        mu = T.reduce_mean(x, axes=-1, keepdims=True)
        centered = x - mu
        var = T.reduce_mean(centered * centered, axes=-1, keepdims=True)
        normed = centered / T.sqrt(var + self.eps)
        return normed * self.gamma + self.beta


class MultiHeadAttention(Layer):
    """Scaled dot-product attention over (B, N, C) token sequences."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        if c % heads != 0:
            raise ConfigError(f"model width {c} not divisible by {heads} heads")
        self.c = c
        self.heads = heads
        self.head_dim = c // heads
        self.q_proj = Linear(c, c, rng)
        self.k_proj = Linear(c, c, rng)
        self.v_proj = Linear(c, c, rng)
        self.out_proj = Linear(c, c, rng)

    def params(self):
        return self._merge({"q": self.q_proj, "k": self.k_proj, "v": self.v_proj, "out": self.out_proj})

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        b, n, _ = q.shape
        nk = k.shape[1]
        qh = self._split(self.q_proj(q), b, n)
        kh = self._split(self.k_proj(k), b, nk)
        vh = self._split(self.v_proj(v), b, nk)
        # per-pair dot products via a trailing-axis reduction (see Linear)
        prod = T.mul(T.reshape(qh, (b, self.heads, n, 1, self.head_dim)),
                     T.reshape(kh, (b, self.heads, 1, nk, self.head_dim)))
        scores = T.reduce_sum(prod, axes=-1) * (1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = T.attention_mix(attn, vh)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, self.c))
        return self.out_proj(ctx)


class FeedForward(Layer):
    """Two-layer MLP with ReLU, wrapped in residual add + LayerNorm."""

    def __init__(self, c: int, rng: np.random.Generator, d_ff: int | None = None,
                 ln_enabled: bool = True):
        d_ff = 4 * c if d_ff is None else d_ff
        self.lin1 = Linear(c, d_ff, rng)
        self.lin2 = Linear(d_ff, c, rng)
        self.norm = LayerNorm(c, enabled=ln_enabled)

    def params(self):
        return self._merge({"lin1": self.lin1, "lin2": self.lin2, "norm": self.norm})

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.lin2(T.relu(self.lin1(x))))


class Conv2d(Layer):
    """k x k convolution (cross-correlation) with stride and zero padding."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * k * k
        std = float(np.sqrt(2.0 / fan_in))
        self.weight = Tensor(rng.standard_normal((c_out, c_in, k, k)) * std, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def positional_encoding_2d(h: int, w: int, c: int) -> Tensor:
    """Sinusoidal position code of shape (C, H, W); constant, no gradient.

    The first C/2 channels encode the normalized row coordinate, the rest
    the column coordinate, each as interleaved sin/cos with temperature
    10000.  Coordinates start at 0, so every sin channel is 0 and every
    cos channel is 1 at the top-left pixel.
    """
    if c % 4 != 0:
        raise ConfigError(f"positional encoding needs width divisible by 4, got {c}")
    half = c // 2
    dtype = np.float32 if T.get_precision() == "f32" else np.float64
    ys = (np.arange(h, dtype=dtype) / h) * (2.0 * np.pi)
    xs = (np.arange(w, dtype=dtype) / w) * (2.0 * np.pi)
    dim_t = 10000.0 ** (2 * (np.arange(half, dtype=dtype) // 2) / half)
    enc = np.zeros((c, h, w), dtype=dtype)
    ang_y = ys[None, :] / dim_t[:, None]          # (half, H)
    ang_x = xs[None, :] / dim_t[:, None]          # (half, W)
    enc[0:half:2] = np.sin(ang_y[0::2])[:, :, None]
    enc[1:half:2] = np.cos(ang_y[1::2])[:, :, None]
    enc[half::2] = np.sin(ang_x[0::2])[:, None, :]
    enc[half + 1 :: 2] = np.cos(ang_x[1::2])[:, None, :]
    return Tensor(enc)
