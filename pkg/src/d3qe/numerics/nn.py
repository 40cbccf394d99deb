"""Parameter containers for the layers used by the model."""

import math

import numpy as np

from ..errors import DimensionError
from . import ops
from .tensor import Parameter


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Anything exposing ``named_parameters()`` in a fixed order."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def cast(self, dtype):
        """Convert every parameter (and its optimizer state) in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, dtype=np.float32):
        self.weight = Parameter(uniform_init(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(uniform_init(rng, (d_out,), d_in, dtype)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class MLP(Module):
    """linear -> GELU -> linear."""

    def __init__(self, rng, d_in, d_hidden, d_out, dtype=np.float32, out_bias=True):
        self.fc1 = Linear(rng, d_in, d_hidden, dtype=dtype)
        self.fc2 = Linear(rng, d_hidden, d_out, bias=out_bias, dtype=dtype)

    def __call__(self, x):
        return mlp_forward(x, self)


def mlp_forward(x, mlp):
    if x.shape[-1] != mlp.fc1.weight.shape[0]:
        raise DimensionError(f"MLP expects {mlp.fc1.weight.shape[0]} input features, got {x.shape[-1]}")
    return mlp.fc2(ops.gelu(mlp.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def __call__(self, x):
        return ops.layer_norm(x, self.gain, self.bias)
