"""Minimal module system: named parameters, buffers and train/eval mode."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Parameter


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name, value):
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for mod_name, m in self.named_modules(prefix):
            for name, p in m._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def named_buffers(self, prefix=""):
        for mod_name, m in self.named_modules(prefix):
            for name, b in m._buffers.items():
                yield (f"{mod_name}.{name}" if mod_name else name), b

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=None, groups=1, bias=False,
                 rng=None, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = (kernel - 1) // 2
        self.stride, self.padding, self.groups = stride, padding, groups
        shape = (out_ch, in_ch // groups, kernel, kernel)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, shape, fan_in, dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        out, mean, var = F.batch_norm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                                        self.training, self.momentum, self.eps)
        if self.training:
            self.set_buffer("running_mean", mean)
            self.set_buffer("running_var", var)
        return out


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """conv -> batch norm -> optional activation."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, groups=1, act="silu", rng=None,
                 dtype=np.float32, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, groups=groups, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, bn_momentum, bn_eps, dtype=dtype)
        self.act = act

    def forward(self, x):
        x = self.bn(self.conv(x))
        return F.activation(x, self.act) if self.act else x
