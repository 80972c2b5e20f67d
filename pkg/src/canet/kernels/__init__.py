"""Convolution kernel backends.

Two implementations of the same three functions (conv2d_forward,
conv2d_backward_input, conv2d_backward_weight):

* ``_conv_ext`` — compiled Cython loops (float32 only), parallelized
  over independent output elements; deterministic for any thread count.
* ``_numpy_kernels`` — im2col + einsum fallback, any float dtype.

Selection happens at import time via CANET_KERNELS (auto | compiled |
numpy, default auto: compiled when the extension built). float64 calls
always take the numpy path regardless of the selection — that path is
the 64-bit shadow used by the gradient checker. CANET_THREADS caps the
compiled kernels' internal parallelism (default 1 thread).
"""

import os

import numpy as np

from ..errors import ConfigError
from . import _numpy_kernels

_requested = os.environ.get("CANET_KERNELS", "auto").lower()
if _requested not in ("auto", "compiled", "numpy"):
    raise ConfigError(f"CANET_KERNELS must be auto|compiled|numpy, got {_requested!r}")

_ext = None
if _requested in ("auto", "compiled"):
    try:
        from . import _conv_ext as _ext
    except ImportError:
        if _requested == "compiled":
            raise ConfigError("CANET_KERNELS=compiled but the extension is not built")
        _ext = None

BACKEND = "compiled" if _ext is not None else "numpy"
_EXT_MODULE = _ext  # keep a handle so use() can re-enable after use("numpy")


def use(backend: str) -> str:
    """Switch backends at runtime (benchmark/test hook); returns the old one."""
    global _ext, BACKEND
    previous = BACKEND
    if backend == "numpy":
        _ext = None
    elif backend == "compiled":
        if _EXT_MODULE is None:
            raise ConfigError("compiled kernels are not built")
        _ext = _EXT_MODULE
    else:
        raise ConfigError(f"backend must be compiled|numpy, got {backend!r}")
    BACKEND = "compiled" if _ext is not None else "numpy"
    return previous


def _num_threads() -> int:
    raw = os.environ.get("CANET_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"CANET_THREADS must be an integer, got {raw!r}")
        if n < 1:
            raise ConfigError("CANET_THREADS must be >= 1")
        return n
    return 1


def _use_ext(*arrays) -> bool:
    return _ext is not None and all(a.dtype == np.float32 for a in arrays)


def conv2d_forward(x, w, stride, padding, groups):
    if _use_ext(x, w):
        return _ext.conv2d_forward(x, w, stride, padding, groups, _num_threads())
    return _numpy_kernels.conv2d_forward(x, w, stride, padding, groups)


def conv2d_backward_input(dy, w, x_shape, stride, padding, groups):
    if _use_ext(dy, w):
        return _ext.conv2d_backward_input(dy, w, x_shape, stride, padding, groups, _num_threads())
    return _numpy_kernels.conv2d_backward_input(dy, w, x_shape, stride, padding, groups)


def conv2d_backward_weight(x, dy, w_shape, stride, padding, groups):
    if _use_ext(x, dy):
        return _ext.conv2d_backward_weight(x, dy, w_shape, stride, padding, groups, _num_threads())
    return _numpy_kernels.conv2d_backward_weight(x, dy, w_shape, stride, padding, groups)
