"""Sliding-window kernels used by convolution and max-pooling.

Two interchangeable backends exist: the compiled ``fssd._ckernels`` extension
and the numpy implementations below. The compiled one is picked at import
when it is importable, unless ``FSSD_PURE_PYTHON=1`` is set.

All arrays are float64, laid out as (batch, channels, height, width).
``im2col`` columns are ordered (channel, kernel_row, kernel_col) so a weight
tensor of shape (out, in, kh, kw) reshaped to (out, in*kh*kw) lines up.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _np_im2col(xp, kh, kw, stride):
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh, ow, c * kh * kw)


def _np_col2im(dcols, padded_shape, kh, kw, stride):
    n, c, hp, wp = padded_shape
    _, oh, ow, _ = dcols.shape
    d = dcols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(padded_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[..., i, j].transpose(0, 3, 1, 2)
    return dx


def _np_maxpool_forward(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def _np_maxpool_backward(dout, arg, x_shape, k, stride):
    oh, ow = dout.shape[2:]
    dx = np.zeros(x_shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.where(hit, dout, 0.0)
    return dx


NUMPY_BACKEND = {
    "im2col": _np_im2col,
    "col2im": _np_col2im,
    "maxpool_forward": _np_maxpool_forward,
    "maxpool_backward": _np_maxpool_backward,
}


def _load_compiled():
    try:
        from fssd import _ckernels
    except ImportError:
        return None
    return {
        "im2col": _ckernels.im2col,
        "col2im": _ckernels.col2im,
        "maxpool_forward": _ckernels.maxpool_forward,
        "maxpool_backward": _ckernels.maxpool_backward,
    }


COMPILED_BACKEND = _load_compiled()

if COMPILED_BACKEND is not None and os.environ.get("FSSD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND_NAME = "compiled"
    _active = COMPILED_BACKEND
else:
    BACKEND_NAME = "numpy"
    _active = NUMPY_BACKEND


def use_backend(name):
    """Switch the active kernel backend ("compiled" or "numpy")."""
    global _active, BACKEND_NAME
    if name == "compiled":
        if COMPILED_BACKEND is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .` with Cython available")
        _active = COMPILED_BACKEND
    elif name == "numpy":
        _active = NUMPY_BACKEND
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND_NAME = name


def im2col(xp, kh, kw, stride):
    return _active["im2col"](np.ascontiguousarray(xp, dtype=np.float64), kh, kw, stride)


def col2im(dcols, padded_shape, kh, kw, stride):
    return _active["col2im"](np.ascontiguousarray(dcols, dtype=np.float64), tuple(padded_shape), kh, kw, stride)


def maxpool_forward(x, k, stride):
    return _active["maxpool_forward"](np.ascontiguousarray(x, dtype=np.float64), k, stride)


def maxpool_backward(dout, arg, x_shape, k, stride):
    return _active["maxpool_backward"](
        np.ascontiguousarray(dout, dtype=np.float64),
        np.ascontiguousarray(arg, dtype=np.int64),
        tuple(x_shape),
        k,
        stride,
    )
