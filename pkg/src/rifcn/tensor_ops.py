"""Dense (n, c, h, w) kernels: convolution, transposed convolution, pooling,
activations, and their adjoints.

Tensors are plain ``numpy.ndarray`` objects in row-major (n, c, h, w) layout.
Convolutions are lowered to a matrix product over an im2col view; the
scatter back (col2im) walks kernel offsets in a fixed order so every result
is reproducible bit-for-bit for a given dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


@dataclass
class ConvKernel:
    """Weights, bias, and geometry of one convolution or deconvolution.

    ``weights`` has shape (out_ch, in_ch, kh, kw) when used by :func:`conv2d`.
    :func:`deconv2d` applies the adjoint of that convolution, so the same
    array maps ``weights.shape[0]`` channels to ``weights.shape[1]``; its
    bias then has length ``weights.shape[1]``.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    transposed: bool = field(default=False)

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-D, got {self.weights.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        expected = self.weights.shape[1] if self.transposed else self.weights.shape[0]
        if self.bias.shape != (expected,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({expected},)")

    @property
    def out_ch(self) -> int:
        return self.weights.shape[1] if self.transposed else self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[0] if self.transposed else self.weights.shape[1]

    @property
    def kh(self) -> int:
        return self.weights.shape[2]

    @property
    def kw(self) -> int:
        return self.weights.shape[3]


def _check4(x: np.ndarray, name: str = "x"):
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty 4-D tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output: ({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    out = stride * (size - 1) + k - 2 * pad
    if out < 1:
        raise ShapeError(f"deconvolution output size {out} is not positive")
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (n, c, ho, wo, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _corr(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Bias-free strided cross-correlation, weights (out, in, kh, kw)."""
    _, c, h, wd = x.shape
    if c != w.shape[1]:
        raise ShapeError(f"input has {c} channels, kernel expects {w.shape[1]}")
    ho = conv_output_size(h, w.shape[2], stride, pad)
    wo = conv_output_size(wd, w.shape[3], stride, pad)
    cols = _im2col(_pad(x, pad), w.shape[2], w.shape[3], stride)[:, :, :ho, :wo]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, out)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                  out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_corr` w.r.t. its input: scatter ``g`` back through ``w``."""
    n, o, ho, wo = g.shape
    if o != w.shape[0]:
        raise ShapeError(f"gradient has {o} channels, kernel produces {w.shape[0]}")
    kh, kw = w.shape[2], w.shape[3]
    h, wd = out_hw
    # per-offset contributions: (n, in, kh, kw, ho, wo)
    contrib = np.tensordot(w, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
    hp = max(h + 2 * pad, stride * (ho - 1) + kh)
    wp = max(wd + 2 * pad, stride * (wo - 1) + kw)
    xp = np.zeros((n, w.shape[1], hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + wd])


def _corr_weight_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int,
                      stride: int, pad: int) -> np.ndarray:
    ho, wo = g.shape[2], g.shape[3]
    cols = _im2col(_pad(x, pad), kh, kw, stride)[:, :, :ho, :wo]
    # (out, in, kh, kw)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Strided 2-D convolution (cross-correlation) with bias."""
    _check4(x)
    if k.transposed:
        raise ShapeError("conv2d called with a transposed kernel")
    y = _corr(x, k.weights, k.stride, k.padding)
    y += k.bias.reshape(1, -1, 1, 1)
    return y


def conv2d_backward(x: np.ndarray, k: ConvKernel, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d`."""
    _check4(x)
    _check4(grad_out, "grad_out")
    n, _, h, wd = x.shape
    expected = (n, k.out_ch,
                conv_output_size(h, k.kh, k.stride, k.padding),
                conv_output_size(wd, k.kw, k.stride, k.padding))
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {expected}")
    grad_x = _corr_adjoint(grad_out, k.weights, k.stride, k.padding, (h, wd))
    grad_w = _corr_weight_grad(x, grad_out, k.kh, k.kw, k.stride, k.padding)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def deconv2d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """Transposed convolution: the adjoint of ``conv2d`` with the same weights.

    With a 4x4 kernel, stride 2 and padding 1 the output is exactly twice the
    input resolution.
    """
    _check4(x)
    if x.shape[1] != k.weights.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels, deconvolution expects {k.weights.shape[0]}"
        )
    h = deconv_output_size(x.shape[2], k.kh, k.stride, k.padding)
    w = deconv_output_size(x.shape[3], k.kw, k.stride, k.padding)
    y = _corr_adjoint(x, k.weights, k.stride, k.padding, (h, w))
    y += k.bias.reshape(1, -1, 1, 1)
    return y


def deconv2d_backward(x: np.ndarray, k: ConvKernel, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`deconv2d`.

    ``grad_x`` is the strided convolution of ``grad_out`` with the same
    weights (the adjoint of the adjoint).
    """
    _check4(x)
    _check4(grad_out, "grad_out")
    n, _, h, wd = x.shape
    expected = (n, k.weights.shape[1],
                deconv_output_size(h, k.kh, k.stride, k.padding),
                deconv_output_size(wd, k.kw, k.stride, k.padding))
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != {expected}")
    grad_x = _corr(grad_out, k.weights, k.stride, k.padding)
    if grad_x.shape != x.shape:
        raise ShapeError(f"deconvolution geometry does not invert: {grad_x.shape} vs {x.shape}")
    # <g, D_W x> = <C_W g, x>, so dW is the conv weight gradient with roles swapped
    grad_w = _corr_weight_grad(grad_out, x, k.kh, k.kw, k.stride, k.padding)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def maxpool2d(x: np.ndarray):
    """2x2 max-pooling with stride 2.

    Returns ``(y, argmax_idx)`` where ``argmax_idx`` holds, for every output
    cell, the flat index into ``x`` of the selected element. Ties go to the
    first element in row-major scan order.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)  # first occurrence on ties
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ni, ci, ii, jj = np.indices(local.shape, sparse=True)
    rows = 2 * ii + local // 2
    cols = 2 * jj + local % 2
    idx = ((ni * c + ci) * h + rows) * w + cols
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool2d_backward(argmax_idx: np.ndarray, grad_out: np.ndarray,
                       in_shape: tuple[int, int, int, int]) -> np.ndarray:
    """Route ``grad_out`` to the positions recorded by :func:`maxpool2d`."""
    n, c, h, w = in_shape
    if grad_out.shape != (n, c, h // 2, w // 2) or argmax_idx.shape != grad_out.shape:
        raise ShapeError(f"grad_out {grad_out.shape} does not match pooled {in_shape}")
    size = n * c * h * w
    if argmax_idx.size and (argmax_idx.min() < 0 or argmax_idx.max() >= size):
        raise IndexError("pooling argmax index out of range (corrupted cache)")
    grad = np.zeros(size, dtype=grad_out.dtype)
    grad[argmax_idx.ravel()] = grad_out.ravel()
    return grad.reshape(in_shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {grad_out.shape}")
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return grad_out * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis of an (n, c, h, w) tensor."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
