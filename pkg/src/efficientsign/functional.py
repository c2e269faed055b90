"""Differentiable layer ops on NCHW tensors.

All functions are pure: inputs are never written to, and the only state that
changes (batch-norm running statistics) is returned rather than mutated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError
from .tensor import Tensor, as_tensor, make_result

ACTIVATIONS = ("relu", "relu6", "silu", "sigmoid")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward)


def sigmoid_array(x):
    # tanh form is overflow-free and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activation(x, kind):
    """Elementwise nonlinearity: ``relu``, ``relu6``, ``silu`` or ``sigmoid``."""
    x = as_tensor(x)
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)

        def backward(g):
            return (g * (d > 0),)
    elif kind == "relu6":
        out = np.clip(d, 0, 6)

        def backward(g):
            return (g * ((d > 0) & (d < 6)),)
    elif kind == "sigmoid":
        out = sigmoid_array(d)

        def backward(g):
            return (g * out * (1 - out),)
    elif kind == "silu":
        s = sigmoid_array(d)
        out = d * s

        def backward(g):
            return (g * (s * (1 + d * (1 - s))),)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return make_result(out.astype(d.dtype, copy=False), (x,), backward)


def _conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation, NCHW input and OIhw weight.

    ``groups == in_channels`` with one filter per channel is the depthwise
    case and runs through a dedicated elementwise kernel.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-d input and weight, got input {x.shape} and weight {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigurationError(f"invalid conv params stride={stride} padding={padding} groups={groups}")
    if cg * groups != c or o % groups != 0:
        raise ConfigurationError(
            f"conv2d weight {weight.shape} with groups={groups} does not match input {x.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError(
            f"conv2d kernel {(kh, kw)} larger than padded input {(h + 2 * padding, w + 2 * padding)}")
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"conv2d bias {bias.shape} does not match {o} output channels")

    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    hs = slice(0, stride * (ho - 1) + 1, stride)
    ws = slice(0, stride * (wo - 1) + 1, stride)

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    depthwise = groups == c and o == c and cg == 1
    pointwise = groups == 1 and kh == 1 and kw == 1

    if pointwise:
        xs = xp[:, :, hs, ws] if stride > 1 else xp
        out = np.matmul(wd[:, :, 0, 0], xs.reshape(n, c, ho * wo)).reshape(n, o, ho, wo)
    elif depthwise:
        out = np.zeros((n, o, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wd[None, :, 0, i, j, None, None]
    elif groups == 1:
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        og = o // groups
        parts = []
        for gi in range(groups):
            xs = Tensor(xd[:, gi * cg:(gi + 1) * cg])
            parts.append(conv2d(xs, Tensor(wd[gi * og:(gi + 1) * og]), None, stride, padding, 1).data)
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gxp = np.zeros_like(xp)
        if pointwise:
            g2 = g.reshape(n, o, ho * wo)
            xs = (xp[:, :, hs, ws] if stride > 1 else xp).reshape(n, c, ho * wo)
            gw = np.einsum("nop,ncp->oc", g2, xs, optimize=True)[:, :, None, None]
            gx_s = np.matmul(wd[:, :, 0, 0].T, g2).reshape(n, c, ho, wo)
            gxp[:, :, hs, ws] = gx_s
        elif depthwise:
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = (g * tap(xp, i, j)).sum(axis=(0, 2, 3))
                    tap(gxp, i, j)[...] += g * wd[None, :, 0, i, j, None, None]
        elif groups == 1:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, wd, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += dcols[..., i, j]
        else:
            og = o // groups
            gws = []
            for gi in range(groups):
                xs = Tensor(xd[:, gi * cg:(gi + 1) * cg], requires_grad=True)
                wsub = Tensor(wd[gi * og:(gi + 1) * og], requires_grad=True)
                conv2d(xs, wsub, None, stride, padding, 1).backward(g[:, gi * og:(gi + 1) * og])
                gws.append(wsub.grad)
                gxp[:, gi * cg:(gi + 1) * cg] = (
                    np.pad(xs.grad, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                    if padding else xs.grad)
            gw = np.concatenate(gws, axis=0)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw.astype(wd.dtype, copy=False), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def max_pool2d(x, kernel=3, stride=2, padding=1):
    """Spatial max pooling with -inf padding; gradient goes to the first max in each window."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    ho = _conv_output_size(h, kernel, stride, padding)
    wo = _conv_output_size(w, kernel, stride, padding)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        ki, kj = np.divmod(idx, kernel)
        rows = np.arange(ho)[None, None, :, None] * stride + ki
        cols = np.arange(wo)[None, None, None, :] * stride + kj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn_, cc, rows, cols), g)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5):
    """Per-channel normalization.

    Returns ``(output, new_running_mean, new_running_var)``. In eval mode the
    running statistics are used and returned unchanged. In train mode the
    batch mean and biased variance normalize the input; the running variance
    is updated with the unbiased batch variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    for name, v in (("gamma", gamma.data), ("beta", beta.data),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(v) != (c,):
            raise ConfigurationError(f"batch_norm2d {name} has shape {np.shape(v)}, input has {c} channels")
    xd = x.data
    dt = xd.dtype
    bshape = (1, c, 1, 1)
    if training:
        m = xd.size // c
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(dt)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(dt)
    else:
        m = None
        mean, var = np.asarray(running_mean, dtype=dt), np.asarray(running_var, dtype=dt)
        new_mean, new_var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        k = (gamma.data * invstd).reshape(bshape)
        if training:
            gx = k * (g - gbeta.reshape(bshape) / m - xhat * gg.reshape(bshape) / m)
        else:
            gx = k * g
        return gx, gg, gbeta

    return make_result(out.astype(dt, copy=False), (x, gamma, beta), backward), new_mean, new_var


def global_avg_pool(x):
    """N×C×H×W -> N×C spatial mean."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError(f"global_avg_pool needs H, W >= 1, got {x.shape}")

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward)


def channel_pool(x):
    """N×C×H×W -> N×2×H×W: channel mean (0) and channel max (1)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c < 1:
        raise ConfigurationError("channel_pool needs at least one channel")
    xd = x.data
    idx = xd.argmax(axis=1)  # first index on ties
    mx = np.take_along_axis(xd, idx[:, None], axis=1)
    out = np.concatenate([xd.mean(axis=1, keepdims=True), mx], axis=1)

    def backward(g):
        gx = np.broadcast_to(g[:, :1] / c, x.shape).astype(xd.dtype)
        np.put_along_axis(gx, idx[:, None], np.take_along_axis(gx, idx[:, None], axis=1) + g[:, 1:], axis=1)
        return (gx,)

    return make_result(out, (x,), backward)


def linear(x, weight, bias=None):
    """N×D input, K×D weight -> N×K."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ConfigurationError(f"linear weight {weight.shape} does not match input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ConfigurationError("train-mode dropout needs an rng stream")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep * scale

    def backward(g):
        return (g * mask,)

    return make_result((x.data * mask).astype(x.dtype, copy=False), (x,), backward)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise InputError(f"expected {n} targets, got shape {targets.shape}")
    bad = np.flatnonzero((targets < 0) | (targets >= k))
    if bad.size:
        raise InputError(f"target index {int(targets[bad[0]])} at position {int(bad[0])} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), targets])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1
        return (p * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
