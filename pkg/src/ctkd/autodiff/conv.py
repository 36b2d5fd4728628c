"""3D convolutions and trilinear resizing on [B, C, X, Y, Z] tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_result


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v}")
    return v


_AXES = ("x", "y", "z")


def _out_extents(spatial, ksize, stride, pad) -> tuple[int, int, int]:
    out = []
    for ax, n, k, s, p in zip(_AXES, spatial, ksize, stride, pad):
        m = (n + 2 * p - k) // s + 1
        if m < 1:
            raise ValueError(f"axis {ax}: extent {n} with kernel {k}, stride {s}, padding {p} gives empty output")
        out.append(m)
    return tuple(out)


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _im2col(xp: np.ndarray, ksize, stride, out_ext) -> np.ndarray:
    """Gather patches into a [C*kx*ky*kz, B*X'*Y'*Z'] matrix."""
    B, C = xp.shape[:2]
    kx, ky, kz = ksize
    sx, sy, sz = stride
    X, Y, Z = out_ext
    cols = np.empty((C, kx, ky, kz, B, X, Y, Z), dtype=xp.dtype)
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                patch = xp[:, :, i : i + sx * X : sx, j : j + sy * Y : sy, l : l + sz * Z : sz]
                cols[:, i, j, l] = patch.transpose(1, 0, 2, 3, 4)
    return cols.reshape(C * kx * ky * kz, B * X * Y * Z)


def _col2im(cols: np.ndarray, padded_shape, ksize, stride, out_ext) -> np.ndarray:
    B, C = padded_shape[:2]
    kx, ky, kz = ksize
    sx, sy, sz = stride
    X, Y, Z = out_ext
    cols = cols.reshape(C, kx, ky, kz, B, X, Y, Z)
    gxp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                gxp[:, :, i : i + sx * X : sx, j : j + sy * Y : sy, l : l + sz * Z : sz] += cols[:, i, j, l].transpose(
                    1, 0, 2, 3, 4
                )
    return gxp


def _unpad(gxp: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return gxp
    px, py, pz = pad
    return gxp[:, :, px : gxp.shape[2] - px, py : gxp.shape[3] - py, pz : gxp.shape[4] - pz]


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,X,Y,Z] with ``kernel`` [Cout,Cin,kx,ky,kz]."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"channel axis: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias axis: expected shape ({kernel.shape[0]},), got {bias.shape}")
    stride, pad = _triple(stride), _triple(padding)
    ksize = kernel.shape[2:]
    out_ext = _out_extents(x.shape[2:], ksize, stride, pad)
    B = x.shape[0]
    cout = kernel.shape[0]

    xp = _pad(x.data, pad)
    cols = _im2col(xp, ksize, stride, out_ext)
    w2 = kernel.data.reshape(cout, -1)
    out = (w2 @ cols).reshape((cout, B) + out_ext).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(cout, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            gcols = w2.T @ g2
            gx = _unpad(_col2im(gcols, xp.shape, ksize, stride, out_ext), pad)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result(out, parents, bw, "conv3d")


def conv3d_transposed(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=2) -> Tensor:
    """Non-overlapping transposed convolution, kernel [Cin, Cout, s, s, s].

    This is the adjoint of ``conv3d`` with the same kernel tensor and matching
    stride (kernel extent equal to stride, no padding).
    """
    stride = _triple(stride)
    if x.ndim != 5 or kernel.ndim != 5:
        raise ValueError(f"conv3d_transposed expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    if tuple(kernel.shape[2:]) != stride:
        raise ValueError(f"kernel extents {kernel.shape[2:]} must equal stride {stride}")
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(f"channel axis: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    B, cin, X, Y, Z = x.shape
    cout = kernel.shape[1]
    sx, sy, sz = stride
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias axis: expected shape ({cout},), got {bias.shape}")

    # [B,X,Y,Z,Cin] @ [Cin, Cout*sx*sy*sz]
    xt = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    w2 = kernel.data.reshape(cin, -1)
    y = (xt @ w2).reshape(B, X, Y, Z, cout, sx, sy, sz)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, cout, X * sx, Y * sy, Z * sz)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gt = g.reshape(B, cout, X, sx, Y, sy, Z, sz).transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(B * X * Y * Z, -1)
        gx = gk = gb = None
        if x.requires_grad:
            gx = (gt @ w2.T).reshape(B, X, Y, Z, cin).transpose(0, 4, 1, 2, 3)
        if kernel.requires_grad:
            gk = (xt.T @ gt).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return make_result(out, parents, bw, "conv3d_transposed")


def depthwise_conv3d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel spatial filtering with ``kernel`` [C, 1, kx, ky, kz]."""
    if x.ndim != 5 or kernel.ndim != 5:
        raise ValueError(f"depthwise_conv3d expects 5-D input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[0] != x.shape[1] or kernel.shape[1] != 1:
        raise ValueError(f"channel axis: depthwise kernel {kernel.shape} does not match {x.shape[1]} input channels")
    stride, pad = _triple(stride), _triple(padding)
    ksize = kernel.shape[2:]
    X, Y, Z = _out_extents(x.shape[2:], ksize, stride, pad)
    sx, sy, sz = stride
    xp = _pad(x.data, pad)
    w = kernel.data[:, 0]
    taps = [(i, j, l) for i in range(ksize[0]) for j in range(ksize[1]) for l in range(ksize[2])]

    def view(arr, i, j, l):
        return arr[:, :, i : i + sx * X : sx, j : j + sy * Y : sy, l : l + sz * Z : sz]

    out = np.zeros((x.shape[0], x.shape[1], X, Y, Z), dtype=np.result_type(x.data, kernel.data))
    for i, j, l in taps:
        out += view(xp, i, j, l) * w[:, i, j, l].reshape(1, -1, 1, 1, 1)

    def bw(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i, j, l in taps:
                gk[:, 0, i, j, l] = np.einsum("bcxyz,bcxyz->c", g, view(xp, i, j, l))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, l in taps:
                view(gxp, i, j, l)[...] += g * w[:, i, j, l].reshape(1, -1, 1, 1, 1)
            gx = _unpad(gxp, pad)
        return gx, gk

    return make_result(out, (x, kernel), bw, "depthwise_conv3d")


def depthwise_separable_conv3d(
    x: Tensor,
    depthwise_kernel: Tensor,
    pointwise_kernel: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
) -> Tensor:
    """Depthwise spatial conv followed by a 1x1x1 channel-mixing conv."""
    if pointwise_kernel.ndim != 5 or pointwise_kernel.shape[2:] != (1, 1, 1):
        raise ValueError(f"pointwise kernel must be [Cout, C, 1, 1, 1], got {pointwise_kernel.shape}")
    if pointwise_kernel.shape[1] != depthwise_kernel.shape[0]:
        raise ValueError(
            f"channel axis: pointwise kernel expects {pointwise_kernel.shape[1]} channels, "
            f"depthwise kernel has {depthwise_kernel.shape[0]}"
        )
    h = depthwise_conv3d(x, depthwise_kernel, stride=stride, padding=padding)
    return conv3d(h, pointwise_kernel, bias)


# ------------------------------------------------------------------ resizing
def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights [n_out, n_in], half-pixel centers, edges clamped."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"extents must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _apply_along(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def resize_array(arr: np.ndarray, target) -> np.ndarray:
    """Trilinear resize of the last three axes of ``arr``."""
    target = _triple(target)
    out = arr
    nd = arr.ndim
    for k, n_out in enumerate(target):
        axis = nd - 3 + k
        if out.shape[axis] != n_out:
            out = _apply_along(out, interpolation_matrix(out.shape[axis], n_out, dtype=arr.dtype), axis)
    return np.ascontiguousarray(out)


def trilinear_resize(x: Tensor, target) -> Tensor:
    """Differentiable trilinear resize of the last three axes."""
    target = _triple(target)
    if any(t < 1 for t in target):
        raise ValueError(f"target extents must be >= 1, got {target}")
    nd = x.ndim
    mats = [interpolation_matrix(n, t, dtype=x.dtype) for n, t in zip(x.shape[-3:], target)]
    out = x.data
    for k, m in enumerate(mats):
        if m.shape[0] != m.shape[1]:
            out = _apply_along(out, m, nd - 3 + k)
    out = np.ascontiguousarray(out)

    def bw(g):
        for k, m in enumerate(mats):
            if m.shape[0] != m.shape[1]:
                g = _apply_along(g, m.T, nd - 3 + k)
        return (np.ascontiguousarray(g),)

    return make_result(out, (x,), bw, "trilinear_resize")
