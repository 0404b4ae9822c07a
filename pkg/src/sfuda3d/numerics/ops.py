"""Differentiable operations used by the segmentation network and the losses.

All spatial ops use the ``(N, C, D, H, W)`` layout.  Outputs inherit the
dtype of their inputs, so building a graph from float64 tensors gives a
64-bit pass suitable for finite-difference checks.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from sfuda3d.exceptions import DimensionError, LabelError, ParameterError
from sfuda3d.numerics.tensor import Tensor, as_tensor, make_result

LOG_FLOOR = 1e-12


def _conv_out(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xd: np.ndarray, k: int, stride: int, dilation: int, padding: int, out_dims) -> np.ndarray:
    """Voxel-major column matrix ``(N*D'*H'*W', k**3 * Cin)``, taps before channels."""
    n, cin = xd.shape[:2]
    od, oh, ow = out_dims
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(xd.transpose(0, 2, 3, 4, 1)).reshape(-1, cin)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2)) if padding else xd
    xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))
    sn, sd, sh, sw, sc = xcl.strides
    view = as_strided(xcl, (n, od, oh, ow, k, k, k, cin),
                      (sn, sd * stride, sh * stride, sw * stride,
                       sd * dilation, sh * dilation, sw * dilation, sc), writeable=False)
    return np.ascontiguousarray(view).reshape(n * od * oh * ow, k ** 3 * cin)


def _kernel_matrix(wd: np.ndarray) -> np.ndarray:
    cout = wd.shape[0]
    return np.ascontiguousarray(wd.transpose(0, 2, 3, 4, 1).reshape(cout, -1))


def _from_rows(rows: np.ndarray, n: int, dims) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, *dims, rows.shape[1]).transpose(0, 4, 1, 2, 3))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation of ``x`` with ``kernel`` (im2col + one GEMM)."""
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise DimensionError(f"conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, d, h, w = x.shape
    cout, kcin, k, k1, k2 = kernel.shape
    if kcin != cin:
        raise DimensionError(f"input has {cin} channels but kernel expects {kcin}")
    if not (k == k1 == k2):
        raise DimensionError("only cubic kernels are supported")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ParameterError("stride and dilation must be >= 1, padding >= 0")
    out_dims = tuple(_conv_out(s, k, stride, dilation, padding) for s in (d, h, w))
    if min(out_dims) < 1:
        raise DimensionError(f"input {x.shape[2:]} too small for kernel {k} with dilation {dilation}")

    cols = _im2col(x.data, k, stride, dilation, padding, out_dims)
    w2 = _kernel_matrix(kernel.data)
    rows = cols @ w2.T
    if bias is not None:
        rows += bias.data
    out = _from_rows(rows, n, out_dims)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = (cols.T @ g2).T.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
            gk = np.ascontiguousarray(gk)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gx = _conv_input_grad(g, g2, kernel.data, w2, x.shape, out_dims, stride, dilation, padding)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward_fn, f"conv3d[k={k},s={stride},d={dilation},p={padding}]")


def _conv_input_grad(g, g2, wd, w2, in_shape, out_dims, stride, dilation, padding):
    n, cin, d, h, w = in_shape
    k = wd.shape[2]
    back_pad = dilation * (k - 1) - padding
    if stride == 1 and back_pad >= 0:
        # stride-1 input gradient = correlation of g with the flipped, transposed kernel
        flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gcols = _im2col(g, k, 1, dilation, back_pad, (d, h, w))
        return _from_rows(gcols @ _kernel_matrix(flipped).T, n, (d, h, w))
    od, oh, ow = out_dims
    gcols = (g2 @ w2).reshape(n, od, oh, ow, k, k, k, cin)
    gxp = np.zeros((n, d + 2 * padding, h + 2 * padding, w + 2 * padding, cin), dtype=g.dtype)
    span = [stride * (o - 1) + 1 for o in out_dims]
    for a in range(k):
        for b in range(k):
            for c in range(k):
                sa, sb, sc = a * dilation, b * dilation, c * dilation
                gxp[:, sa:sa + span[0]:stride, sb:sb + span[1]:stride,
                    sc:sc + span[2]:stride] += gcols[:, :, :, :, a, b, c]
    gx = gxp[:, padding:padding + d, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


@lru_cache(maxsize=64)
def _interp_matrix(length: int, factor: int, dtype_name: str) -> np.ndarray:
    # align_corners=False: output i samples input coordinate (i + 0.5) / f - 0.5
    out_len = length * factor
    m = np.zeros((out_len, length), dtype=np.float64)
    src = np.maximum((np.arange(out_len) + 0.5) / factor - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), length - 1)
    i1 = np.minimum(i0 + 1, length - 1)
    w1 = src - i0
    np.add.at(m, (np.arange(out_len), i0), 1.0 - w1)
    np.add.at(m, (np.arange(out_len), i1), w1)
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def _along(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, x, axes=(1, axis)), 0, axis)


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ParameterError(f"upsampling factor must be >= 1, got {factor}")
    if x.data.ndim != 5:
        raise DimensionError("trilinear_upsample expects (N, C, D, H, W)")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample[x1]")
    mats = [_interp_matrix(s, factor, x.dtype.name) for s in x.shape[2:]]
    out = x.data
    for axis, m in zip((2, 3, 4), mats):
        out = _along(out, m, axis)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        for axis, m in zip((2, 3, 4), mats):
            g = _along(g, m.T, axis)
        return (np.ascontiguousarray(g),)

    return make_result(out, (x,), backward_fn, f"upsample[x{factor}]")


def softmax_channel(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), backward_fn, "softmax_channel")


def cross_entropy(prob: Tensor, target) -> Tensor:
    """Mean over voxels and batch of ``-log p[target]`` with a 1e-12 floor."""
    target = np.asarray(target)
    n, c = prob.shape[:2]
    if target.shape == prob.shape[2:] and n == 1:
        target = target[None]
    if target.shape != (n,) + prob.shape[2:]:
        raise DimensionError(f"target shape {target.shape} does not match prediction {prob.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise LabelError(f"target ids must lie in [0, {c}), got max {target.max()}")
    idx = target.astype(np.intp)[:, None]
    picked = np.take_along_axis(prob.data, idx, axis=1)
    clamped = np.maximum(picked, LOG_FLOOR)
    count = picked.size
    loss = np.asarray(-np.log(clamped).sum() / count, dtype=prob.dtype)

    def backward_fn(g):
        local = np.where(picked > LOG_FLOOR, -1.0 / (count * clamped), 0.0).astype(prob.dtype)
        grad = np.zeros_like(prob.data)
        np.put_along_axis(grad, idx, local * g, axis=1)
        return (grad,)

    return make_result(loss, (prob,), backward_fn, "cross_entropy")


def global_avg_pool(x: Tensor) -> Tensor:
    spatial = x.shape[2:]
    nvox = int(np.prod(spatial))
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)

    def backward_fn(g):
        return (np.broadcast_to(g / nvox, x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward_fn, "global_avg_pool")


def broadcast_spatial(x: Tensor, spatial: tuple[int, int, int]) -> Tensor:
    """Expand a ``(N, C, 1, 1, 1)`` tensor to ``(N, C, *spatial)``."""
    if x.shape[2:] != (1, 1, 1):
        raise DimensionError("broadcast_spatial expects singleton spatial dims")
    out = np.ascontiguousarray(np.broadcast_to(x.data, x.shape[:2] + tuple(spatial)))
    return make_result(out, (x,), lambda g: (g.sum(axis=(2, 3, 4), keepdims=True),), "broadcast_spatial")


def concat_channels(tensors: list[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in tensors]
    if len({t.shape[:1] + t.shape[2:] for t in tensors}) != 1:
        raise DimensionError("concat_channels needs matching batch and spatial dims")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward_fn, "concat_channels")


def channels_last(x: Tensor) -> Tensor:
    """Flatten ``(N, C, D, H, W)`` into a ``(N*D*H*W, C)`` point matrix."""
    shape = x.shape
    out = np.ascontiguousarray(np.moveaxis(x.data, 1, -1).reshape(-1, shape[1]))

    def backward_fn(g):
        n, c, d, h, w = shape
        return (np.ascontiguousarray(np.moveaxis(g.reshape(n, d, h, w, c), -1, 1)),)

    return make_result(out, (x,), backward_fn, "channels_last")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant weight array; handy for probing gradients."""
    weights = np.asarray(weights, dtype=x.dtype)
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (g * weights,), "weighted_sum")
