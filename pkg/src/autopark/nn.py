"""Trainable building blocks on top of :mod:`autopark.autodiff`."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; parameters and child modules are discovered by attribute."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def param(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, size=shape))


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = glorot(rng, n_in, n_out, (n_in, n_out))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class MLP(Module):
    """Two-layer perceptron with a ReLU hidden layer."""

    def __init__(self, rng, n_in, n_hidden, n_out):
        self.fc1 = Linear(rng, n_in, n_hidden)
        self.fc2 = Linear(rng, n_hidden, n_out)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, padding=1):
        fan_in = kernel * kernel * c_in
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, c_in, c_out)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GRUCell(Module):
    """Gated recurrent unit; gates ordered (reset, update, candidate)."""

    def __init__(self, rng, n_in, n_hidden):
        self.n_hidden = n_hidden
        self.w_x = glorot(rng, n_in, 3 * n_hidden, (n_in, 3 * n_hidden))
        self.w_h = glorot(rng, n_hidden, 3 * n_hidden, (n_hidden, 3 * n_hidden))
        self.b_x = param(np.zeros(3 * n_hidden))
        self.b_h = param(np.zeros(3 * n_hidden))

    def __call__(self, x, h):
        n = self.n_hidden
        gx = ad.linear(x, self.w_x, self.b_x)
        gh = ad.linear(h, self.w_h, self.b_h)
        r = ad.sigmoid(gx[..., :n] + gh[..., :n])
        z = ad.sigmoid(gx[..., n:2 * n] + gh[..., n:2 * n])
        cand = ad.tanh(gx[..., 2 * n:] + r * gh[..., 2 * n:])
        return (1.0 - z) * cand + z * h


def sincos_1d(positions, dim):
    """Standard sinusoidal table: ``[sin(p w_0), cos(p w_0), sin(p w_1), ...]``."""
    if dim % 2:
        raise ValueError(f"sine-cosine encoding needs an even width, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = 1.0 / (10000.0 ** (np.arange(0, dim, 2) / dim))
    ang = positions[:, None] * freqs[None, :]
    out = np.empty((positions.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class MultiHeadAttention(Module):
    def __init__(self, rng, d_model, n_heads):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.o = Linear(rng, d_model, d_model)

    def _split(self, x):
        b, t, d = x.shape
        return x.reshape(b, t, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def project_kv(self, key_value):
        """Split key/value projections, reusable across queries."""
        return self._split(self.k(key_value)), self._split(self.v(key_value))

    def __call__(self, query, key_value, mask=None, kv=None):
        """``query``: (B, Tq, d); ``key_value``: (B, Tk, d); ``mask`` broadcastable
        to (B, H, Tq, Tk), True = attend. ``kv`` may carry :meth:`project_kv` output
        in place of ``key_value``. Returns (output, weights (B, H, Tq, Tk))."""
        q = self._split(self.q(query))
        k, v = self.project_kv(key_value) if kv is None else kv
        ctx, weights = ad.attention(q, k, v, mask)
        b, h, t, dh = ctx.shape
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, h * dh)
        return self.o(ctx), weights


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, d_model, n_heads, d_ff):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.ff = MLP(rng, d_model, d_ff, d_model)

    def __call__(self, x):
        h = self.ln1(x)
        a, w = self.attn(h, h)
        x = x + a
        x = x + self.ff(self.ln2(x))
        return x, w


class DecoderLayer(Module):
    """Pre-norm block: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, rng, d_model, n_heads, d_ff):
        self.ln1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln3 = LayerNorm(d_model)
        self.ff = MLP(rng, d_model, d_ff, d_model)

    def __call__(self, x, memory, causal_mask, memory_kv=None):
        h = self.ln1(x)
        a, _ = self.self_attn(h, h, causal_mask)
        x = x + a
        c, _ = self.cross_attn(self.ln2(x), memory, kv=memory_kv)
        x = x + c
        return x + self.ff(self.ln3(x))
