"""2-D convolution and its transpose, differentiable.

Layout is (batch, channels, height, width) with symmetric zero padding.
``conv2d`` weights are (out_ch, in_ch, kh, kw).  ``transposed_conv2d`` keeps
the forward-convolution weight layout and is the exact adjoint of ``conv2d``
with the same weight, stride, and padding: <conv2d(x, w), y> == <x,
transposed_conv2d(y, w)> holds to rounding.

The inference-only numpy helpers (``conv2d_np``, ``transposed_conv2d_np``)
run the same numerical code without recording on the tape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import ShapeError, Var, _accum, as_var


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int) -> np.ndarray:
    """Strided view of all kernel-sized windows: (N, C, OH, OW, kh, kw)."""
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def _conv_fwd(x, w, sh, sw, ph, pw):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, sh, sw, ph, pw)
    return np.einsum("nchwij,ocij->nohw", win, w)


def _conv_dw(x, g, kh, kw, sh, sw, ph, pw):
    win = _windows(x, kh, kw, sh, sw, ph, pw)
    return np.einsum("nchwij,nohw->ocij", win, g)


def _conv_dx(g, w, sh, sw, ph, pw, out_h, out_w):
    """Scatter-add adjoint of ``_conv_fwd``; also the transposed-conv forward."""
    n, _, gh, gw = g.shape
    _, c, kh, kw = w.shape
    canvas = np.zeros((n, c, out_h + 2 * ph, out_w + 2 * pw), dtype=g.dtype)
    spread = np.einsum("ocij,nohw->ncijhw", w, g)
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i : i + sh * gh : sh, j : j + sw * gw : sw] += spread[:, :, i, j]
    return canvas[:, :, ph : ph + out_h, pw : pw + out_w]


def conv_out_shape(hw, kernel, stride, padding) -> tuple[int, int]:
    (h, w), (kh, kw), (sh, sw), (ph, pw) = hw, _pair(kernel), _pair(stride), _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _check_conv_shapes(x, w, sh, sw, ph, pw):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    oh, ow = conv_out_shape(x.shape[2:], w.shape[2:], (sh, sw), (ph, pw))
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {w.shape[2:]} does not fit input {x.shape} with padding {(ph, pw)}"
        )
    return oh, ow


def conv2d(x: Var, w: Var, b: Var | None = None, stride=1, padding=0) -> Var:
    """Cross-correlation of (N, C, H, W) with (O, C, kh, kw) weights."""
    x, w = as_var(x), as_var(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _check_conv_shapes(x.value, w.value, sh, sw, ph, pw)
    kh, kw = w.value.shape[2], w.value.shape[3]
    h, wd = x.value.shape[2], x.value.shape[3]
    xv, wv = x.value, w.value
    out = _conv_fwd(xv, wv, sh, sw, ph, pw)

    def bwd(g):
        _accum(w, _conv_dw(xv, g, kh, kw, sh, sw, ph, pw))
        _accum(x, _conv_dx(g, wv, sh, sw, ph, pw, h, wd))

    y = Var(out, (x, w), bwd)
    if b is not None:
        b = as_var(b)
        if b.value.shape != (w.value.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.value.shape} does not match {w.value.shape[0]} filters")
        y = y + b.reshape((1, -1, 1, 1))
    return y


def transposed_conv2d(
    x: Var, w: Var, b: Var | None = None, stride=1, padding=0, output_padding=0
) -> Var:
    """Adjoint of ``conv2d``: (N, O, h, w) -> (N, C, H, W) with weight (O, C, kh, kw).

    Output size per axis is (h - 1) * stride + k - 2 * padding + output_padding,
    with 0 <= output_padding < stride.
    """
    x, w = as_var(x), as_var(w)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"transposed_conv2d: expected 4-d input and weight, got {xv.shape} and {wv.shape}")
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"transposed_conv2d: input channels {xv.shape} do not match weight {wv.shape}")
    if not (0 <= oph < sh and 0 <= opw < sw):
        raise ShapeError(f"transposed_conv2d: output_padding {(oph, opw)} must be < stride {(sh, sw)}")
    kh, kw = wv.shape[2], wv.shape[3]
    out_h = (xv.shape[2] - 1) * sh + kh - 2 * ph + oph
    out_w = (xv.shape[3] - 1) * sw + kw - 2 * pw + opw
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"transposed_conv2d: non-positive output size {(out_h, out_w)}")
    out = _conv_dx(xv, wv, sh, sw, ph, pw, out_h, out_w)

    def bwd(g):
        _accum(w, _conv_dw(g, xv, kh, kw, sh, sw, ph, pw))
        _accum(x, _conv_fwd(g, wv, sh, sw, ph, pw))

    y = Var(out, (x, w), bwd)
    if b is not None:
        b = as_var(b)
        if b.value.shape != (wv.shape[1],):
            raise ShapeError(
                f"transposed_conv2d: bias shape {b.value.shape} does not match {wv.shape[1]} output channels"
            )
        y = y + b.reshape((1, -1, 1, 1))
    return y


def conv2d_np(x, w, b=None, stride=1, padding=0):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _check_conv_shapes(x, w, sh, sw, ph, pw)
    out = _conv_fwd(x, w, sh, sw, ph, pw)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


def transposed_conv2d_np(x, w, b=None, stride=1, padding=0, output_padding=0):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    kh, kw = w.shape[2], w.shape[3]
    out_h = (x.shape[2] - 1) * sh + kh - 2 * ph + oph
    out_w = (x.shape[3] - 1) * sw + kw - 2 * pw + opw
    out = _conv_dx(x, w, sh, sw, ph, pw, out_h, out_w)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out
