"""Squeeze-and-Excitation channel attention and the 7x7 spatial attention gate."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigurationError
from .nn import Module, kaiming_uniform
from .tensor import Parameter


def se_hidden(channels, reduction):
    return max(1, channels // reduction)


def se_forward(x, w1, b1, w2, b2, act="relu", return_gate=False):
    """Gate each channel of ``x`` by sigmoid(w2 . act(w1 . GAP(x) + b1) + b2)."""
    if x.shape[1] != w1.shape[1]:
        raise ConfigurationError(f"SE block expects {w1.shape[1]} channels, input has shape {x.shape}")
    z = F.global_avg_pool(x)
    h = F.activation(F.linear(z, w1, b1), act)
    s = F.activation(F.linear(h, w2, b2), "sigmoid")
    out = F.mul(x, F.reshape(s, s.shape + (1, 1)))
    return (out, s) if return_gate else out


def spatial_forward(x, kernel, bias, return_map=False):
    """Gate each pixel of ``x`` by sigmoid(conv7x7([mean_c(x), max_c(x)]))."""
    k = kernel.shape[-1]
    logits = F.conv2d(F.channel_pool(x), kernel, bias, stride=1, padding=(k - 1) // 2)
    m = F.activation(logits, "sigmoid")
    out = F.mul(x, m)
    return (out, m) if return_map else out


class SEBlock(Module):
    """Channel attention with a ``channels -> hidden -> channels`` bottleneck.

    ``hidden`` defaults to ``max(1, channels // reduction)``. The MBConv
    blocks reuse this class with an explicit hidden width and SiLU.
    Setting ``enabled = False`` forces every gate to 1.
    """

    def __init__(self, channels, reduction=16, hidden=None, act="relu", rng=None, dtype=np.float32):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ConfigurationError(f"invalid SE block channels={channels} reduction={reduction}")
        self.channels, self.reduction, self.act = channels, reduction, act
        self.hidden = hidden if hidden is not None else se_hidden(channels, reduction)
        self.enabled = True
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w1 = Parameter(kaiming_uniform(rng, (self.hidden, channels), channels, dtype))
        self.b1 = Parameter(np.zeros(self.hidden, dtype=dtype))
        self.w2 = Parameter(kaiming_uniform(rng, (channels, self.hidden), self.hidden, dtype))
        self.b2 = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        if not self.enabled:
            return x
        return se_forward(x, self.w1, self.b1, self.w2, self.b2, self.act)

    def gate(self, x):
        return se_forward(x, self.w1, self.b1, self.w2, self.b2, self.act, return_gate=True)[1]


class SpatialAttentionBlock(Module):
    """Pixel attention from channel-pooled avg/max maps; 2*k*k + 1 parameters."""

    def __init__(self, kernel_size=7, rng=None, dtype=np.float32):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"spatial attention kernel must be odd, got {kernel_size}")
        self.enabled = True
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = 2 * kernel_size * kernel_size
        self.kernel = Parameter(kaiming_uniform(rng, (1, 2, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(1, dtype=dtype))

    def forward(self, x):
        if not self.enabled:
            return x
        return spatial_forward(x, self.kernel, self.bias)

    def attention_map(self, x):
        return spatial_forward(x, self.kernel, self.bias, return_map=True)[1]
