"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module mirrors every
signature here. All 2D kernels reduce over the last axis of a C-contiguous
``(rows, n)`` array.
"""
import numpy as np
from scipy.special import erf

NAME = "python"

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, grad):
    dot = (grad * y).sum(axis=-1, keepdims=True)
    return y * (grad - dot)


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def layer_norm_forward(x, gain, shift, eps):
    x = _rows(x)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + shift, xhat, rstd[:, 0]


def layer_norm_backward(grad, xhat, rstd, gain):
    grad = _rows(grad)
    grad_gain = (grad * xhat).sum(axis=0)
    grad_shift = grad.sum(axis=0)
    gx = grad * gain
    m1 = gx.mean(axis=-1, keepdims=True)
    m2 = (gx * xhat).mean(axis=-1, keepdims=True)
    grad_x = (gx - m1 - xhat * m2) * rstd[:, None]
    return grad_x, grad_gain, grad_shift


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_backward(x, grad):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad * (cdf + x * pdf)


def patchify(x, kt, ks):
    n, c, t, h, w = x.shape
    blocks = x.reshape(n, c, t // kt, kt, h // ks, ks, w // ks, ks)
    blocks = blocks.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return np.ascontiguousarray(blocks).reshape(
        n, (t // kt) * (h // ks) * (w // ks), c * kt * ks * ks
    )


def unpatchify(cols, c, t, h, w, kt, ks):
    n = cols.shape[0]
    blocks = cols.reshape(n, t // kt, h // ks, w // ks, c, kt, ks, ks)
    blocks = blocks.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return np.ascontiguousarray(blocks).reshape(n, c, t, h, w)
