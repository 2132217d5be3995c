"""Tiny module system: ordered parameter registration over the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import Parameter


class Module:
    """Base class; attributes that are Parameters/Modules/buffers register in insertion order.

    Ordering matters: the optimizer, checkpoint records, and any gradient
    reduction all iterate parameters in this fixed order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = name
        object.__setattr__(self, name, np.asarray(array))

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix=""):
        """Parameters plus buffers, as (name, ndarray) pairs in registration order."""
        for name, p in self._params.items():
            yield prefix + name, p.data
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_state(prefix + name + ".")

    def load_state(self, state):
        """Load a {name: ndarray} mapping produced by named_state."""
        for name, _ in list(self.named_state()):
            if name not in state:
                raise KeyError(f"checkpoint missing tensor {name!r}")
        for name, p in self.named_parameters():
            p.data = np.asarray(state[name], dtype=p.data.dtype).reshape(p.data.shape)
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in self._buffers:
            key = prefix + name
            cur = getattr(self, name)
            object.__setattr__(self, name, np.asarray(state[key], dtype=cur.dtype).reshape(cur.shape))
        for name, m in self._modules.items():
            m._load_buffers(state, prefix + name + ".")

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _kaiming(rng, shape, fan_in, dtype):
    scale = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(_kaiming(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(_kaiming(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True, dtype=np.float32):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(_kaiming(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, num_groups, channels, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.num_groups, self.eps = num_groups, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        return T.group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab, dim, rng, dtype=np.float32, scale=0.02):
        super().__init__()
        self.weight = Parameter((rng.standard_normal((vocab, dim)) * scale).astype(dtype))

    def forward(self, ids):
        return T.embedding_lookup(self.weight, ids)
