"""Small module system on top of the tensor engine.

Modules are plain classes whose attributes are Parameters, sub-modules or
lists of sub-modules; `named_parameters` walks that structure and assigns
dotted path names.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError


class Module:

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            yield from _walk(name, value)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        out = {}
        for name, p in self.named_parameters():
            p.name = name
            out[name] = p.data
        return out

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name}")
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} "
                    f"!= model shape {p.shape}")
            p.data = arr.copy()


def _walk(name, value):
    if isinstance(value, Parameter):
        value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    vals = rng.normal(0.0, std, size=shape)
    vals = np.clip(vals, -2.0 * std, 2.0 * std)
    return vals.astype(dtype)


class Linear(Module):

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=np.float32):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim),
                                             dtype=dtype))
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):

    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    """Group normalization over a [C,H,W] map with per-channel affine."""

    def __init__(self, channels, groups=4, dtype=np.float32, eps=1e-5):
        if channels % groups:
            raise ShapeError(f"channels {channels} not divisible by "
                             f"{groups} groups")
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.groups = groups
        self.eps = eps

    def __call__(self, x):
        c, h, w = x.shape
        g = self.groups
        xg = T.reshape(x, (g, (c // g) * h * w))
        mu = T.tmean(xg, axis=1, keepdims=True)
        xc = xg - mu
        var = T.tmean(T.mul(xc, xc), axis=1, keepdims=True)
        norm = T.mul(xc, T.power(T.add(var, self.eps), -0.5))
        norm = T.reshape(norm, (c, h, w))
        gamma = T.reshape(self.gamma, (c, 1, 1))
        beta = T.reshape(self.beta, (c, 1, 1))
        return T.add(T.mul(norm, gamma), beta)


class Mlp(Module):
    """Two-layer MLP with GELU, expansion ratio 4 by default."""

    def __init__(self, dim, rng, ratio=4, dtype=np.float32):
        self.fc1 = Linear(dim, dim * ratio, rng, dtype=dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class ConvNormRelu(Module):
    """3x3 conv + group norm + ReLU; spatial size preserved (pad 1)."""

    def __init__(self, in_ch, out_ch, rng, groups=4, dtype=np.float32):
        fan_in = in_ch * 9
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(
            rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        self.norm = GroupNorm(out_ch, groups=min(groups, out_ch), dtype=dtype)

    def __call__(self, x):
        y = T.conv2d(x, self.weight, self.bias, stride=1, pad=1)
        return T.relu(self.norm(y))


class Conv3x3(Module):
    """Bare 3x3 conv with bias (used for output heads)."""

    def __init__(self, in_ch, out_ch, rng, dtype=np.float32):
        std = np.sqrt(1.0 / (in_ch * 9))
        self.weight = Parameter(
            rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=1, pad=1)
