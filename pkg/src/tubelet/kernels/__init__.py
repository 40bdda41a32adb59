"""Hot-loop kernels with a compiled implementation and a numpy fallback.

The compiled extension is used when it imported cleanly; setting
``TUBELET_KERNELS=python`` forces the fallback. ``use()`` switches the
active backend at runtime (tests and the benchmark compare both).
"""
import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

available = tuple(_BACKENDS)

_requested = os.environ.get("TUBELET_KERNELS", "").strip().lower()
if _requested and _requested not in _BACKENDS:
    _requested = ""
_active = _BACKENDS[_requested or ("compiled" if _ckernels is not None else "python")]


def backend():
    """Name of the active backend (``"compiled"`` or ``"python"``)."""
    return _active.NAME


def set_backend(name):
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available}") from None


@contextlib.contextmanager
def use(name):
    previous = _active.NAME
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def softmax_forward(x):
    return _active.softmax_forward(x)


def softmax_backward(y, grad):
    return _active.softmax_backward(y, grad)


def layer_norm_forward(x, gain, shift, eps):
    return _active.layer_norm_forward(x, gain, shift, eps)


def layer_norm_backward(grad, xhat, rstd, gain):
    return _active.layer_norm_backward(grad, xhat, rstd, gain)


def gelu_forward(x):
    return _active.gelu_forward(x)


def gelu_backward(x, grad):
    return _active.gelu_backward(x, grad)


def patchify(x, kt, ks):
    return _active.patchify(x, kt, ks)


def unpatchify(cols, c, t, h, w, kt, ks):
    return _active.unpatchify(cols, c, t, h, w, kt, ks)
