"""Differentiable operations over :class:`~avdepth.tensor.Tensor`.

Broadcasting is limited to per-channel bias/affine terms and python scalars;
every other binary op demands identical shapes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, make_result


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    s = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def log1p(a: Tensor) -> Tensor:
    d = a.data
    return make_result(np.log1p(d), (a,), lambda g: (g / (1.0 + d),), "log1p")


def square(a: Tensor) -> Tensor:
    d = a.data
    return make_result(d * d, (a,), lambda g: (2.0 * g * d,), "square")


# ----------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def expand_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Tile a ``[B, C]`` vector over an ``h x w`` grid -> ``[B, C, h, w]``."""
    if v.ndim != 2:
        raise DimensionError(f"expand_spatial expects [B, C], got {v.shape}")
    out = np.broadcast_to(v.data[:, :, None, None], v.shape + (h, w)).copy()
    return make_result(out, (v,), lambda g: (g.sum(axis=(2, 3)),), "expand_spatial")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, C]``."""
    B, C, H, W = x.shape
    n = H * W
    return make_result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / n, (B, C, H, W)).copy(),),
        "global_avg_pool",
    )


def _adaptive_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    B, C, H, W = x.shape
    oh, ow = out_hw
    if (oh, ow) == (H, W):
        return x
    rows, cols = _adaptive_bounds(H, oh), _adaptive_bounds(W, ow)
    out = np.empty((B, C, oh, ow))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def back(g):
        gx = np.zeros((B, C, H, W))
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                n = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / n)[:, :, None, None]
        return (gx,)

    return make_result(out, (x,), back, "adaptive_avg_pool2d")


# ----------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded ``[B, C, Hp, Wp]`` input as ``[B, C*kh*kw, ho*wo]``."""
    B, C = xp.shape[:2]
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    return np.ascontiguousarray(v.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """Scatter-add ``[B, C, kh, kw, H, W]`` patches onto a ``[B, C, *out_hw]`` canvas."""
    B, C, kh, kw, H, W = cols.shape
    sh, sw = stride
    out = np.zeros((B, C) + tuple(out_hw))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (H - 1) + 1 : sh, j : j + sw * (W - 1) + 1 : sw] += cols[:, :, i, j]
    return out


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor], cin_axis: int, cout_axis: int, op: str):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{op}: input {x.shape} and weight {w.shape} must both be 4-D")
    if x.shape[1] != w.shape[cin_axis]:
        raise DimensionError(
            f"{op}: input channels (axis 1) = {x.shape[1]} but weight axis {cin_axis} = {w.shape[cin_axis]}"
        )
    if b is not None and b.shape != (w.shape[cout_axis],):
        raise DimensionError(f"{op}: bias shape {b.shape} != ({w.shape[cout_axis]},)")


def _batched_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_b a[b] @ b[b].T`` for ``[B, M, N]`` and ``[B, K, N]`` stacks."""
    if a.shape[2] <= 16:
        # tiny spatial extent: one gemm over the folded batch wins
        return np.tensordot(a, b, axes=([0, 2], [0, 2]))
    out = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        out += a[i] @ b[i].T
    return out


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``weight`` is ``[Cout, Cin, kh, kw]``."""
    _check_conv(x, weight, bias, 1, 0, "conv2d")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    B, C, H, W = x.shape
    cout, _, kh, kw = weight.shape
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(H + 2 * ph, W + 2 * pw)} on axes (2, 3)"
        )
    ho = (H + 2 * ph - kh) // sh + 1
    wo = (W + 2 * pw - kw) // sw + 1
    hp, wp = H + 2 * ph, W + 2 * pw
    cols = _im2col(_pad(x.data, ph, pw), kh, kw, sh, sw, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(B, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(B, cout, ho * wo)
        gw = _batched_outer(g2, cols).reshape(weight.shape)
        gx = None
        if need_x:
            gcols = np.matmul(np.ascontiguousarray(wmat.T), g2).reshape(B, C, kh, kw, ho, wo)
            gx = _col2im(gcols, (hp, wp), (sh, sw))[:, :, ph : ph + H, pw : pw + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0
) -> Tensor:
    """Fractionally strided convolution; ``weight`` is ``[Cin, Cout, kh, kw]``.

    Output size is ``(H - 1) * stride - 2 * padding + k``. The input gradient
    is exactly ``conv2d`` of the output gradient with the same weight.
    """
    _check_conv(x, weight, bias, 0, 1, "conv_transpose2d")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {(sh, sw)}")
    B, C, H, W = x.shape
    _, cout, kh, kw = weight.shape
    hf, wf = (H - 1) * sh + kh, (W - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: padding {(ph, pw)} leaves empty output on axes (2, 3)")
    wmat = weight.data.reshape(C, -1)  # Cin, Cout*kh*kw
    x2 = x.data.reshape(B, C, H * W)
    cols = np.matmul(np.ascontiguousarray(wmat.T), x2).reshape(B, cout, kh, kw, H, W)
    out = np.ascontiguousarray(_col2im(cols, (hf, wf), (sh, sw))[:, :, ph : ph + ho, pw : pw + wo])
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def back(g):
        gcols = _im2col(_pad(g, ph, pw), kh, kw, sh, sw, H, W)  # B, Cout*kh*kw, H*W
        gw = _batched_outer(x2, gcols).reshape(weight.shape)
        gx = np.matmul(wmat, gcols).reshape(B, C, H, W) if need_x else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "conv_transpose2d")


# ----------------------------------------------------------------------------
# normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization over ``[B, C, H, W]``.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [B, C, H, W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} vs {C} channels")
    xd = x.data
    axes = (0, 2, 3)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dxhat = g * gd[None, :, None, None]
        if training:
            dx = (
                n * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            ) * (inv_std / n)[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), back, "batch_norm")


# ----------------------------------------------------------------------------
# bilinear forms


def matvec_bilinear(fe: Tensor, A: Tensor, v: Tensor) -> Tensor:
    """Scalar ``fe^T A v``."""
    if fe.ndim != 1 or v.ndim != 1 or A.shape != (fe.shape[0], v.shape[0]):
        raise DimensionError(f"matvec_bilinear: fe {fe.shape}, A {A.shape}, v {v.shape}")
    f, a, vv = fe.data, A.data, v.data
    Av = a @ vv
    return make_result(
        np.asarray(f @ Av),
        (fe, A, v),
        lambda g: (g * Av, g * np.outer(f, vv), g * (f @ a)),
        "matvec_bilinear",
    )


def bilinear_map(fe: Tensor, A: Tensor, fmap: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel bilinear transform.

    ``out[b, j, p, q] = sum_mn fe[b, m] A[j, m, n] fmap[b, n, p, q] + bias[j]``
    with ``fe: [B, N]``, ``A: [K, N, N]``, ``fmap: [B, N, h, w]``.
    """
    if fe.ndim != 2 or A.ndim != 3 or fmap.ndim != 4:
        raise DimensionError(f"bilinear_map: fe {fe.shape}, A {A.shape}, fmap {fmap.shape}")
    B, N = fe.shape
    K = A.shape[0]
    if A.shape[1:] != (N, fmap.shape[1]) or fmap.shape[0] != B:
        raise DimensionError(f"bilinear_map: fe {fe.shape}, A {A.shape}, fmap {fmap.shape}")
    if bias is not None and bias.shape != (K,):
        raise DimensionError(f"bilinear_map: bias {bias.shape} != ({K},)")
    f, a, m = fe.data, A.data, fmap.data
    h, w = fmap.shape[2:]
    a2 = a.transpose(1, 0, 2).reshape(N, K * N)  # m, (j n)
    proj = (f @ a2).reshape(B, K, N)
    m2 = m.reshape(B, N, h * w)
    out = np.matmul(proj, m2).reshape(B, K, h, w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (fe, A, fmap) if bias is None else (fe, A, fmap, bias)

    def back(g):
        g2 = g.reshape(B, K, h * w)
        gm_sum = np.matmul(g2, m2.transpose(0, 2, 1))  # B, K, N
        gfe = gm_sum.reshape(B, K * N) @ a2.T
        gA = (f.T @ gm_sum.reshape(B, K * N)).reshape(N, K, N).transpose(1, 0, 2)
        gmap = np.matmul(proj.transpose(0, 2, 1), g2).reshape(B, N, h, w)
        if bias is None:
            return gfe, gA, gmap
        return gfe, gA, gmap, g.sum(axis=(0, 2, 3))

    return make_result(out, parents, back, "bilinear_map")


def channel_dot(fe: Tensor, fmap: Tensor) -> Tensor:
    """``out[b, 0, p, q] = <fe[b], fmap[b, :, p, q]>``."""
    if fe.ndim != 2 or fmap.ndim != 4 or fe.shape != fmap.shape[:2]:
        raise DimensionError(f"channel_dot: fe {fe.shape}, fmap {fmap.shape}")
    f, m = fe.data, fmap.data
    B, N, h, w = m.shape
    m2 = m.reshape(B, N, h * w)
    # same batched matmul as bilinear_map so identity A reproduces this bitwise
    out = np.matmul(f[:, None, :], m2).reshape(B, 1, h, w)

    def back(g):
        g2 = g.reshape(B, 1, h * w)
        gfe = np.matmul(g2, m2.transpose(0, 2, 1))[:, 0]
        return gfe, f[:, :, None, None] * g

    return make_result(out, (fe, fmap), back, "channel_dot")
