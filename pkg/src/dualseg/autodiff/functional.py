"""Convolutional-network operations with hand-written backward passes.

All image tensors are NCHW. Convolution uses an im2col view built with
``as_strided`` followed by a single ``tensordot``; the input gradient is
scattered back one kernel tap at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .tensor import ShapeError, Tensor

BN_MOMENTUM = 0.99
BN_EPS = 1e-5


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (B, C, Ho, Wo, kh, kw), (s0, s1, s2 * sh, s3 * sw, s2, s3), writeable=False)


def _pad(x: np.ndarray, ph: int, pw: int, value=0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: Input of shape ``[B, Cin, H, W]``.
        weight: Kernel of shape ``[Cout, Cin, kh, kw]``.
        bias: Optional ``[Cout]`` bias.
        stride: Int or ``(sh, sw)``.
        padding: Int or ``(ph, pw)``.

    Returns:
        Tensor of shape ``[B, Cout, H', W']`` with
        ``H' = (H + 2*ph - kh) // sh + 1``.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, wcin, kh, kw = weight.shape
    if wcin != Cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {x.shape} with padding {(ph, pw)}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {Cout} output channels")

    w = weight.data
    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        xd = x.data
        out = np.tensordot(w[:, :, 0, 0], xd, axes=([1], [1])).transpose(1, 0, 2, 3)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def backward_fn(g):
            gx = np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb
    else:
        xp = _pad(x.data, ph, pw)
        cols = _windows(xp, kh, kw, sh, sw)
        Ho, Wo = cols.shape[2], cols.shape[3]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def backward_fn(g):
            cols = _windows(xp, kh, kw, sh, sw)
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            # [B, Ho, Wo, Cin, kh, kw]
            gcols = np.tensordot(g, w, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
            return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "conv2d", inputs, backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the
    running statistics in ``state`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``. In inference
    mode the running statistics are used instead.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d params {gamma.shape}/{beta.shape} do not match {C} channels")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    eps = state.eps

    if training:
        n = B * H * W
        if n < 2:
            raise ValueError("batchnorm2d in train mode needs B*H*W >= 2 (zero-variance batch)")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = m * state.running_mean + (1 - m) * mu
        state.running_var[...] = m * state.running_var + (1 - m) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward_fn(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean[None, :, None, None].astype(xd.dtype)) * inv_std[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward_fn(g):
            return g * gd * inv_std[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out.astype(xd.dtype, copy=False), "batchnorm2d", (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor._from_op(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; padded cells never win (they hold -inf)."""
    B, C, H, W = x.shape
    if H + 2 * padding < kernel or W + 2 * padding < kernel:
        raise ShapeError(f"maxpool2d kernel {kernel} larger than padded input {x.shape}")
    xp = _pad(x.data, padding, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, stride)
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * (arg == k)
        return (gxp[:, :, padding:padding + H, padding:padding + W],)

    return Tensor._from_op(np.ascontiguousarray(out), "maxpool2d", (x,), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Duplicate every pixel into a 2x2 block."""
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return Tensor._from_op(out, "upsample_nearest2x", (x,),
                           lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def _bilinear_matrix(n_in: int, scale: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    """Separable bilinear upsampling by an integer factor."""
    B, C, H, W = x.shape
    ay = _bilinear_matrix(H, scale, x.dtype)
    ax = _bilinear_matrix(W, scale, x.dtype)
    out = ay @ x.data @ ax.T
    return Tensor._from_op(out, "upsample_bilinear", (x,), lambda g: (ay.T @ g @ ax,))


def concat_channels(*xs: Tensor) -> Tensor:
    """Concatenate along the channel axis, in argument order."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels needs identical B,H,W; got {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return Tensor._from_op(out, "concat_channels", xs, lambda g: tuple(np.split(g, splits, axis=1)))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size-1 dims."""
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return Tensor._from_op(out, "global_avg_pool", (x,),
                           lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),))
