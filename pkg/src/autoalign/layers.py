"""Minimal parameter containers over the tensor primitives."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything holding parameter tensors, directly or in child modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _param(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class Linear(Module):
    """y = x W + b with W stored as [in, out]."""

    def __init__(self, n_in, n_out, rng, bias=True, gain=2.0):
        self.weight = _param(rng.standard_normal((n_in, n_out)) * np.sqrt(gain / n_in))
        self.bias = _param(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Linear layers with relu between them (none after the last)."""

    def __init__(self, dims, rng, final_gain=1.0):
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], rng, gain=2.0 if i < n - 1 else final_gain)
                       for i in range(n)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, gain=2.0):
        self.weight = _param(rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(gain / (c_in * k * k)))
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)
