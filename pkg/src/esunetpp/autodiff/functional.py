"""Differentiable network primitives on NCHW tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D (B, C, H, W) tensor, got shape {x.shape}")


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Gather padded NCHW input into a (C, kh, kw, B, Ho, Wo) column array."""
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(1, 0, 2, 3)
    return cols


def _col2im(cols: np.ndarray, out: np.ndarray, stride: int) -> np.ndarray:
    """Scatter-add a (C, kh, kw, B, Ho, Wo) column array into NCHW ``out``."""
    _, kh, kw, _, Ho, Wo = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _to_cbhw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(a.shape[1], -1)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with a (out, in, kh, kw) kernel, via im2col + matmul."""
    _check_4d(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (out, in, kh, kw), got {kernel.shape}")
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be non-negative, got {pad}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ci}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} smaller than kernel {kh}x{kw}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = _pad_hw(x.data, pad)
    if kh == kw == 1 and stride == 1:
        cols2d = _to_cbhw(xp)
    else:
        cols2d = _im2col(xp, kh, kw, stride, Ho, Wo).reshape(C * kh * kw, -1)
    w2d = kernel.data.reshape(O, -1)
    out = (w2d @ cols2d).reshape(O, B, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gx = gk = gb = None
        g2d = _to_cbhw(g)
        if kernel.requires_grad:
            gk = (g2d @ cols2d.T).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (w2d.T @ g2d).reshape(C, kh, kw, B, Ho, Wo)
            gxp = _col2im(dcols, np.zeros_like(xp), stride)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if bias is not None and bias.requires_grad:
            gb = g2d.sum(axis=1)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution with a (in, out, kh, kw) kernel.

    Output size is ``(H - 1) * stride - 2 * pad + k``; every input pixel
    scatters a scaled copy of the kernel, then ``pad`` rows/cols are cropped
    from each border. This is the adjoint of :func:`conv2d` with the same
    stride and padding.
    """
    _check_4d(x, "conv_transpose2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d kernel must be (in, out, kh, kw), got {kernel.shape}")
    if stride <= 0:
        raise ParameterError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be non-negative, got {pad}")
    B, C, H, W = x.shape
    Ci, O, kh, kw = kernel.shape
    if Ci != C:
        raise ShapeError(f"conv_transpose2d: input has {C} channels but kernel expects {Ci}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({O},)")
    Hf = (H - 1) * stride + kh
    Wf = (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * pad, Wf - 2 * pad
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")

    x2d = _to_cbhw(x.data)
    w2d = kernel.data.reshape(C, -1)
    taps = (w2d.T @ x2d).reshape(O, kh, kw, B, H, W)
    full = _col2im(taps, np.zeros((B, O, Hf, Wf), dtype=taps.dtype), stride)
    out = np.ascontiguousarray(full[:, :, pad:pad + Ho, pad:pad + Wo])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        cols2d = _im2col(_pad_hw(g, pad), kh, kw, stride, H, W).reshape(O * kh * kw, -1)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((w2d @ cols2d).reshape(C, B, H, W).transpose(1, 0, 2, 3))
        if kernel.requires_grad:
            gk = (x2d @ cols2d.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    Ties go to the first element of the window in row-major order, so the
    backward pass sends each window's gradient to exactly one input.
    """
    _check_4d(x, "max_pool2d")
    if window <= 0 or stride != window:
        raise ParameterError("max_pool2d supports non-overlapping windows only (stride == window)")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise ShapeError(f"max_pool2d: spatial dims {H}x{W} not divisible by {window}")
    k = window
    blocks = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    In training mode batch statistics are used and ``running`` is updated
    (unbiased variance, exponential moving average with ``momentum``).
    """
    _check_4d(x, "batch_norm")
    if eps <= 0:
        raise ParameterError(f"batch_norm eps must be positive, got {eps}")
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batch_norm: scale/shift must have shape ({C},)")
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running.mean = ((1 - momentum) * running.mean + momentum * mu).astype(running.mean.dtype)
        running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(running.var.dtype)
    else:
        n = None
        mu, var = running.mean.astype(x.dtype), running.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def bw(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data[None, :, None, None]
            if training:
                s1 = gxhat.sum(axis=axes)[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv_std[None, :, None, None] / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return make_result(out, (x, scale, shift), bw)


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; batch and spatial dims must agree."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs:
        _check_4d(t, "concat_channels")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return make_result(out, tuple(inputs), bw)
