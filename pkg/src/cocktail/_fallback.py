"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, kh, kw, stride):
    # (B, C, Hp, Wp) -> (B, Ho, Wo, C, kh, kw)
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols, Hp, Wp, stride):
    B, Ho, Wo, C, kh, kw = cols.shape
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def silu_forward(x):
    v = x.astype(np.float64)
    return (v / (1.0 + np.exp(-v))).astype(x.dtype)


def silu_backward(x, g):
    v = x.astype(np.float64)
    s = 1.0 / (1.0 + np.exp(-v))
    return (g * s * (1.0 + v * (1.0 - s))).astype(x.dtype)


def channel_stats(x, eps):
    v = x.astype(np.float64)
    mu = v.mean(axis=1)
    var = ((v - mu[:, None]) ** 2).mean(axis=1)
    return mu, np.sqrt(var + eps)
