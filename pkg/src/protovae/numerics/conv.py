"""Convolution, transposed convolution and average pooling (NCHW).

The ``*_array`` functions are plain numpy kernels; the explain module reuses
them to push relevance backwards through the same layers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import make_result
from .ops import _lift


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _im2col(x, k, stride, padding):
    """(N, C, H, W) -> columns (N*Ho*Wo, C*k*k) plus (Ho, Wo)."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols, shape, k, stride, padding, ho, wo):
    """Adjoint of :func:`_im2col`: scatter-add columns into an (N, C, H, W) array."""
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    # the window grid may not reach the far border; allocate enough room
    hp = max(hp, (ho - 1) * stride + k)
    wp = max(wp, (wo - 1) * stride + k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, k, k)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out[:, :, padding : padding + h, padding : padding + w]


def _check_conv(x, weight, bias, stride, padding, transposed=False):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}", dim=0)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"expected square 4-D kernel, got {weight.shape}")
    in_ch = weight.shape[0] if transposed else weight.shape[1]
    if x.shape[1] != in_ch:
        raise ShapeError(
            f"input has {x.shape[1]} channels (dim 1), kernel expects {in_ch}", dim=1
        )
    out_ch = weight.shape[1] if transposed else weight.shape[0]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {bias.shape} != ({out_ch},)", dim=0)
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    k = weight.shape[2]
    if not transposed:
        for dim in (2, 3):
            if x.shape[dim] + 2 * padding < k:
                raise ShapeError(
                    f"spatial dim {dim} of size {x.shape[dim]} too small for kernel {k}"
                    f" with padding {padding}",
                    dim=dim,
                )


# -- numpy kernels ------------------------------------------------------------


def conv2d_array(x, w, b=None, stride=1, padding=0):
    n = x.shape[0]
    o, _, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, padding)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_input_grad(g, w, input_shape, stride=1, padding=0):
    """Adjoint of conv2d with respect to its input."""
    n, o, ho, wo = g.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    cols = g2 @ w.reshape(o, -1)
    return _col2im(cols, input_shape, w.shape[2], stride, padding, ho, wo)


def conv_transpose2d_array(x, w, b=None, stride=1, padding=0, output_padding=0):
    n, cin, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    ho = conv_transpose_output_size(h, k, stride, padding, output_padding)
    wo = conv_transpose_output_size(wd, k, stride, padding, output_padding)
    cols = x.transpose(0, 2, 3, 1).reshape(-1, cin) @ w.reshape(cin, -1)
    out = _col2im(cols, (n, cout, ho, wo), k, stride, padding, h, wd)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def avg_pool2d_array(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.mean(axis=(4, 5)))


def avg_pool2d_input_grad(g, input_shape, kernel, stride):
    n, c, ho, wo = g.shape
    out = np.zeros(input_shape, dtype=g.dtype)
    share = g / (kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return out


# -- differentiable wrappers --------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of an NCHW batch with an (O, C, k, k) kernel."""
    x, weight = _lift(x), _lift(weight)
    bias = None if bias is None else _lift(bias)
    _check_conv(x, weight, bias, stride, padding)
    n = x.shape[0]
    o, _, k, _ = weight.shape
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            gx = _col2im(g2 @ wmat, x.shape, k, stride, padding, ho, wo)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    fn = lambda a, w, b=None: conv2d_array(a, w, b, stride, padding)
    return make_result(
        "conv2d", fn, inputs, np.ascontiguousarray(out), backward,
        stride=stride, padding=padding,
    )


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution with an (C_in, C_out, k, k) kernel.

    This is the adjoint of :func:`conv2d` with the same kernel, stride and
    padding; ``output_padding`` extends the bottom/right border so that an
    odd-sized conv input can be reproduced exactly.
    """
    x, weight = _lift(x), _lift(weight)
    bias = None if bias is None else _lift(bias)
    _check_conv(x, weight, bias, stride, padding, transposed=True)
    if output_padding and not 0 <= output_padding < stride:
        raise ShapeError(f"output_padding {output_padding} must be < stride {stride}")
    cin, cout, k, _ = weight.shape
    out = conv_transpose2d_array(
        x.data, weight.data, None if bias is None else bias.data,
        stride, padding, output_padding,
    )
    n, _, h, wd = x.shape
    xcols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)

    def backward(g):
        gcols, _, _ = _im2col(g, k, stride, padding)
        # gcols rows line up with input pixels; drop windows past the input grid
        gcols = gcols.reshape(n, -1, cout * k * k)
        gh = conv_output_size(g.shape[2], k, stride, padding)
        gw_ = conv_output_size(g.shape[3], k, stride, padding)
        gcols = gcols.reshape(n, gh, gw_, -1)[:, :h, :wd].reshape(-1, cout * k * k)
        gx = (gcols @ weight.data.reshape(cin, -1).T).reshape(n, h, wd, cin)
        gx = gx.transpose(0, 3, 1, 2)
        gweight = (xcols.T @ gcols).reshape(weight.shape)
        grads = [gx, gweight]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    fn = lambda a, w, b=None: conv_transpose2d_array(a, w, b, stride, padding, output_padding)
    return make_result(
        "conv_transpose2d", fn, inputs, out, backward,
        stride=stride, padding=padding, output_padding=output_padding,
    )


def avg_pool2d(x, kernel, stride=None):
    """Window means; trailing rows/cols that do not fill a window are dropped."""
    x = _lift(x)
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}", dim=0)
    for dim in (2, 3):
        if x.shape[dim] < kernel:
            raise ShapeError(f"spatial dim {dim} smaller than pooling window", dim=dim)
    out = avg_pool2d_array(x.data, kernel, stride)

    def backward(g):
        return (avg_pool2d_input_grad(g, x.shape, kernel, stride),)

    fn = lambda a: avg_pool2d_array(a, kernel, stride)
    return make_result(
        "avg_pool2d", fn, (x,), np.ascontiguousarray(out), backward,
        kernel=kernel, stride=stride,
    )
