"""Dense float tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a C-ordered numpy array. Operations executed while a
:class:`GradientTape` is active, and that touch at least one tensor with
``requires_grad``, are appended to the tape; :meth:`GradientTape.gradient`
then walks the records in exact reverse order.

Only the operations the reconstruction model needs are provided. Convolution
is restricted to non-overlapping tiles (stride equal to kernel size).
"""
import math

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError

LN_EPS = 1e-5
SUPPORTED_SCALES = (1.0, 0.5, 0.25)

_tapes = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float32
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class GradientTape:
    """Records differentiable operations for a single backward pass.

    ``visited`` lists the record indices in the order the backward pass
    evaluated them; it is strictly decreasing.
    """

    def __init__(self):
        self.records = []
        self.visited = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def gradient(self, target, sources):
        """Gradient of scalar ``target`` with respect to each of ``sources``.

        Sources the target does not depend on get exact zeros.
        """
        if target.data.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads = {id(target): np.ones_like(target.data)}
        self.visited = []
        for index in range(len(self.records) - 1, -1, -1):
            out, inputs, backward = self.records[index]
            g = grads.pop(id(out), None)
            if g is None:
                continue
            self.visited.append(index)
            for tensor, gi in zip(inputs, backward(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for src in sources:
            g = grads.get(id(src))
            result.append(np.zeros_like(src.data) if g is None else g.astype(src.dtype, copy=False))
        return result


def _emit(data, inputs, backward):
    out = Tensor(data, dtype=data.dtype)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].records.append((out, inputs, backward))
    return out


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


# -- elementwise -----------------------------------------------------------

def _leading_broadcast(big, small):
    n = len(small)
    return n <= len(big) and tuple(big[len(big) - n:]) == tuple(small)


def _sum_to(g, shape):
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a, b):
    """Sum; ``b`` may omit leading axes of ``a`` (bias/positional rows)."""
    a, b = as_tensor(a), as_tensor(b, dtype=None)
    if a.shape != b.shape and not _leading_broadcast(a.shape, b.shape):
        if _leading_broadcast(b.shape, a.shape):
            return add(b, a)
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def _mask_broadcast(a_shape, m_shape):
    return len(a_shape) >= 3 and tuple(m_shape) == tuple(a_shape[:-3]) + tuple(a_shape[-2:])


def mul(a, b):
    """Product of equal shapes, or a (..., C, H, W) tensor times a (..., H, W) mask."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _mask_broadcast(a.shape, b.shape):
        bx = np.expand_dims(b.data, -3)
        return _emit(
            a.data * bx, (a, b),
            lambda g: (g * bx, (g * a.data).sum(axis=-3)),
        )
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def scale(a, s):
    a = as_tensor(a)
    return _emit(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),))


def clamp(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def elementwise(op, a, b=None):
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``scale`` or ``clamp``.

    ``clamp`` takes ``b`` as a ``(lo, hi)`` pair.
    """
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    if op == "clamp":
        return clamp(a, *b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# -- shape manipulation ----------------------------------------------------

def reshape(x, shape):
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes):
    inverse = np.argsort(axes)
    return _emit(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def total(x):
    return _emit(np.asarray(x.data.sum(dtype=x.dtype)), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.data.size
    return scale(total(x), 1.0 / n)


# -- linear algebra --------------------------------------------------------

def _swap(m):
    return np.swapaxes(m, -1, -2)


def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be 2D and shared."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ _swap(b.data)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(a.data) @ g
        return ga, gb

    return _emit(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data.T
    if bias is not None:
        y += bias.data
    out_shape = x.shape[:-1] + (weight.shape[0],)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        return (gx, gw) + ((g2.sum(axis=0),) if bias is not None else ())

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(y.reshape(out_shape), inputs, backward)


def conv3d(x, kernel, bias, stride=None):
    """Non-overlapping 3D convolution.

    ``x`` is (C_in, T, H, W) or batched (N, C_in, T, H, W); ``kernel`` is
    (C_out, C_in, k_t, k_s, k_s). Output is (N?, C_out, T/k_t, H/k_s, W/k_s).
    """
    c_out, c_in, kt, kh, kw = kernel.shape
    if stride is not None and tuple(stride) != (kt, kh, kw):
        raise ConfigError(f"conv3d: stride {tuple(stride)} must equal kernel size {(kt, kh, kw)}")
    if kh != kw:
        raise ConfigError(f"conv3d: spatial kernel must be square, got {kh}x{kw}")
    batched = x.ndim == 5
    xd = x.data if batched else x.data[None]
    n, c, t, h, w = xd.shape
    if c != c_in:
        raise DimensionError(f"conv3d: input {x.shape} has {c} channels, kernel {kernel.shape} expects {c_in}")
    if t % kt or h % kh or w % kw:
        raise ConfigError(f"conv3d: extents {(t, h, w)} are not divisible by kernel {(kt, kh, kw)}")
    cols = kernels.patchify(xd, kt, kh)
    k2 = kernel.data.reshape(c_out, -1)
    tokens = cols @ k2.T + bias.data
    grid = (t // kt, h // kh, w // kw)
    y = np.ascontiguousarray(tokens.reshape((n,) + grid + (c_out,)).transpose(0, 4, 1, 2, 3))
    if not batched:
        y = y[0]

    def backward(g):
        gd = g if batched else g[None]
        gtok = np.ascontiguousarray(gd.transpose(0, 2, 3, 4, 1)).reshape(n, -1, c_out)
        gflat = gtok.reshape(-1, c_out)
        gk = (gflat.T @ cols.reshape(-1, cols.shape[-1])).reshape(kernel.shape)
        gb = gflat.sum(axis=0)
        gx = kernels.unpatchify(gtok @ k2, c, t, h, w, kt, kh)
        return (gx if batched else gx[0]), gk, gb

    return _emit(y, (x, kernel, bias), backward)


def fold_tubelets(cols, c, t, h, w, kt, ks):
    """Scatter per-token blocks (N, P, c*kt*ks*ks) back to (N, c, t, h, w).

    Inverse of the tiling used by :func:`conv3d`; every output element is
    written exactly once.
    """
    n, p, f = cols.shape
    if p != (t // kt) * (h // ks) * (w // ks) or f != c * kt * ks * ks:
        raise DimensionError(f"fold_tubelets: {cols.shape} does not tile ({c}, {t}, {h}, {w}) with ({kt}, {ks}, {ks})")
    y = kernels.unpatchify(cols.data, c, t, h, w, kt, ks)
    return _emit(y, (cols,), lambda g: (kernels.patchify(np.ascontiguousarray(g), kt, ks),))


# -- nonlinearities --------------------------------------------------------

def softmax(x, axis=-1):
    axis = axis % x.ndim
    last = axis == x.ndim - 1
    xd = x.data if last else np.moveaxis(x.data, axis, -1)
    y = kernels.softmax_forward(xd)

    def backward(g):
        gd = g if last else np.moveaxis(g, axis, -1)
        gx = kernels.softmax_backward(y, gd)
        return (gx if last else np.ascontiguousarray(np.moveaxis(gx, -1, axis)),)

    out = y if last else np.ascontiguousarray(np.moveaxis(y, -1, axis))
    return _emit(out, (x,), backward)


def layer_norm(x, gain, shift, eps=LN_EPS):
    d = gain.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"layer_norm: last extent of {x.shape} must equal {d}")
    y, xhat, rstd = kernels.layer_norm_forward(x.data, gain.data, shift.data, eps)

    def backward(g):
        gx, gg, gs = kernels.layer_norm_backward(g, xhat, rstd, gain.data)
        return gx.reshape(x.shape), gg, gs

    return _emit(y.reshape(x.shape), (x, gain, shift), backward)


def gelu(x):
    return _emit(kernels.gelu_forward(x.data), (x,), lambda g: (kernels.gelu_backward(x.data, g),))


# -- resampling ------------------------------------------------------------

_resize_cache = {}


def resize_matrix(n, s, dtype=np.float64):
    """(ceil(s*n), n) bilinear interpolation weights, half-pixel centres, edge clamped."""
    key = (n, s, np.dtype(dtype).str)
    m = _resize_cache.get(key)
    if m is None:
        m_out = math.ceil(s * n)
        m = np.zeros((m_out, n), dtype=np.float64)
        for i in range(m_out):
            src = min(max((i + 0.5) / s - 0.5, 0.0), n - 1.0)
            i0 = int(math.floor(src))
            i1 = min(i0 + 1, n - 1)
            frac = src - i0
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        m = m.astype(dtype)
        m.setflags(write=False)
        _resize_cache[key] = m
    return m


def bilinear_resize(x, s):
    """Resize the last two axes by factor ``s`` in {1.0, 0.5, 0.25}."""
    if s not in SUPPORTED_SCALES:
        raise ConfigError(f"bilinear_resize: unsupported scale {s}; expected one of {SUPPORTED_SCALES}")
    if s == 1.0:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    h, w = x.shape[-2:]
    rh = resize_matrix(h, s, x.dtype)
    rw = resize_matrix(w, s, x.dtype)
    y = rh @ (x.data @ rw.T)
    return _emit(y, (x,), lambda g: ((rh.T @ g) @ rw,))


# -- gradient checking -----------------------------------------------------

def gradient_errors(f, params, step=1e-3, floor=1e-8, relative_floor=0.0, max_entries=None, seed=0):
    """Per-parameter worst relative error of reverse-mode vs central differences.

    ``params`` maps names to tensors (double precision expected) and ``f``
    is called with no arguments, reading the current parameter values. The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor')`` where
    ``floor' = max(floor, relative_floor * max|a|)`` over that tensor, so
    entries negligible next to their group's largest gradient are measured
    against the group scale rather than their own. ``max_entries``
    subsamples entries per tensor (seeded) for large parameter sets.
    """
    items = list(params.items()) if isinstance(params, dict) else [
        (p.name or str(i), p) for i, p in enumerate(params)
    ]
    for _, p in items:
        p.requires_grad = True
    with GradientTape() as tape:
        loss = f()
    analytic = tape.gradient(loss, [p for _, p in items])
    rng = np.random.default_rng(seed)
    errors = {}
    for (name, p), ga in zip(items, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        tensor_floor = max(floor, relative_floor * float(np.abs(gflat).max(initial=0.0)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            a = float(gflat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), tensor_floor)
            worst = max(worst, err)
        errors[name] = worst
    return errors


def check_gradients(f, params, step=1e-3, floor=1e-8, relative_floor=0.0, max_entries=None):
    """Worst relative error over all parameter entries (see :func:`gradient_errors`)."""
    errors = gradient_errors(
        f, params, step=step, floor=floor, relative_floor=relative_floor, max_entries=max_entries
    )
    return max(errors.values()) if errors else 0.0
