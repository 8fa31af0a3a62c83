"""2-D convolution and pooling on channels-last (N, H, W, C) tensors."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, _result, as_tensor


def _im2col(xp, k, stride, ho, wo):
    # (N, H', W', C, k, k) view -> strided -> (N*ho*wo, C*k*k) copy
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[0], xp.shape[3]
    return win.reshape(n * ho * wo, c * k * k)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` (N, H, W, C) with ``weight`` (O, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and OCkk weight, got {x.shape}, {weight.shape}")
    n, h, w, c = x.shape
    o, wc, k, k2 = weight.shape
    if wc != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc} (kernel {k}x{k2})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xd = x.data
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    wmat = weight.data.reshape(o, c * k * k)
    cols = _im2col(xp, k, stride, ho, wo)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(n * ho * wo, o)
        cols_ = _im2col(xp, k, stride, ho, wo)
        gw = (g2.T @ cols_).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[..., i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _result(out, parents, back, "conv2d")


def avg_pool2d(x, size):
    """Non-overlapping ``size`` x ``size`` average pooling."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, h // size, size, w // size, size, c).mean(axis=(2, 4))

    def back(g):
        g = np.repeat(np.repeat(g, size, axis=1), size, axis=2)
        return (g / (size * size),)

    return _result(out, (x,), back, "avg_pool2d")


def global_avg_pool2d(x):
    """Average over the two spatial axes: (N, H, W, C) -> (N, C)."""
    x = as_tensor(x)
    n, h, w, c = x.shape

    def back(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(1, 2)), (x,), back, "global_avg_pool2d")
