"""Parameterized layers on top of the tensor engine.

All initialization draws from an explicit seeded generator; modules expose a
flat name -> Tensor parameter table for the optimizer and the checkpoint
format. Attention blocks are pre-norm, so an empty stack is an exact
identity.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


class Module:
    """Minimal container: parameters are requires_grad Tensors on attributes;
    submodules and lists of submodules are walked recursively."""

    def parameters(self) -> dict:
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, T.Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def _param(arr) -> T.Tensor:
    return T.tensor(arr, requires_grad=True)


def xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero_init=False):
        w = np.zeros((d_in, d_out)) if zero_init else xavier(rng, d_in, d_out)
        self.w = _param(w)
        self.b = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        return T.add(out, self.b) if self.b is not None else out


class MLP(Module):
    """Linear stack with relu between layers (none after the last)."""

    def __init__(self, rng, d_in, d_hidden, d_out, depth=3, zero_last=False):
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        self.layers = [Linear(rng, dims[i], dims[i + 1],
                              zero_init=(zero_last and i == depth - 1))
                       for i in range(depth)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng, count, dim, scale=0.02):
        self.table = _param(rng.normal(scale=scale, size=(count, dim)))

    def __call__(self, idx):
        return T.gather_rows(self.table, np.asarray(idx, dtype=np.int64))


class Conv(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=0):
        fan_in = c_in * k * k
        self.w = _param(rng.normal(scale=math.sqrt(2.0 / fan_in),
                                   size=(c_out, c_in, k, k)))
        self.b = _param(np.zeros(c_out))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class SelfAttention(Module):
    """Multi-head self-attention; positions add to queries and keys only."""

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ValueError(f"hidden {dim} not divisible by heads {heads}")
        self.heads = heads
        self.dim = dim
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, x, pos=None, mask=None):
        n = x.shape[0]
        h, dh = self.heads, self.dim // self.heads
        qk_in = T.add(x, pos) if pos is not None else x
        q = self.wq(qk_in)
        k = self.wk(qk_in)
        v = self.wv(x)

        def split(t):
            return T.transpose(T.reshape(t, (n, h, dh)), (1, 0, 2))

        q, k, v = split(q), split(k), split(v)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))),
                       1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1,
                         mask=None if mask is None else mask[None, :, :])
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (n, self.dim))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, rng, dim, mult=2):
        self.up = Linear(rng, dim, dim * mult)
        self.down = Linear(rng, dim * mult, dim)

    def __call__(self, x):
        return self.down(T.relu(self.up(x)))


def sine_embed(coords: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of normalized coordinates, [N, dim].

    Each of the C input coordinates gets an equal share of sin/cos pairs on
    a linear frequency ladder (periods 1 down to 1/half); leftover dims are
    zero-padded.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n, c = coords.shape
    half = max(1, dim // (2 * c))
    freqs = 2.0 * math.pi * (1.0 + np.arange(half))
    ang = coords[:, :, None] * freqs[None, None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(n, -1)
    if feats.shape[1] < dim:
        feats = np.pad(feats, ((0, 0), (0, dim - feats.shape[1])))
    return feats[:, :dim]
