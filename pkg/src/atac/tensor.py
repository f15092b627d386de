"""Forward numeric kernels on dense float64 NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every kernel is a
pure function: it never mutates its inputs and identical inputs give
bitwise-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes violate a kernel precondition."""


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return ``x`` as a contiguous float64 array, checking the rank/shape invariants."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"shape entries must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be >= 0")

    @classmethod
    def pointwise(cls, in_channels: int, out_channels: int, has_bias: bool = False) -> "ConvSpec":
        return cls(in_channels, out_channels, 1, 1, 1, 0, has_bias)

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_h == self.kernel_w == 1 and self.stride == 1 and self.padding == 0

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size, floor((size + 2*padding - k) / stride) + 1; must be >= 1."""
        out = []
        for size, k in ((h, self.kernel_h), (w, self.kernel_w)):
            span = size + 2 * self.padding - k
            if span < 0:
                raise ShapeError(f"kernel {k} does not fit input size {size} with padding {self.padding}")
            out.append(span // self.stride + 1)
        return out[0], out[1]


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "elementwise_mul")
    return a * b


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return a + b


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gather conv patches into [N, C*kh*kw, H'*W'] (row order c, i, j)."""
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    p, s = spec.padding, spec.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, spec.kernel_h, spec.kernel_w, ho, wo), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            cols[:, :, i, j] = x[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * spec.kernel_h * spec.kernel_w, ho * wo)


def col2im(cols: np.ndarray, spec: ConvSpec, x_shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back onto an [N, C, H, W] map."""
    n, c, h, w = x_shape
    ho, wo = spec.output_hw(h, w)
    p, s = spec.padding, spec.stride
    cols = cols.reshape(n, c, spec.kernel_h, spec.kernel_w, ho, wo)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]
    if p:
        out = out[:, :, p:-p, p:-p]
    return np.ascontiguousarray(out)


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {w.shape} does not match spec {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {spec.in_channels}")
    return spec.output_hw(x.shape[2], x.shape[3])


def conv2d(x, w, spec: ConvSpec, bias=None) -> np.ndarray:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [K,C,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, spec)
    n, _, h, wd = x.shape
    ho, wo = spec.output_hw(h, wd)
    if spec.is_pointwise:
        out = np.matmul(w[:, :, 0, 0], x.reshape(n, spec.in_channels, h * wd))
    else:
        out = np.matmul(w.reshape(spec.out_channels, -1), im2col(x, spec))
    out = out.reshape(n, spec.out_channels, ho, wo)
    if spec.has_bias:
        if bias is None:
            raise ShapeError("conv2d spec has_bias but no bias given")
        bias = as_tensor(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True)


def broadcast_mul(x, g) -> np.ndarray:
    x, g = as_tensor(x), as_tensor(g)
    if x.ndim != 4 or g.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"broadcast_mul: gate shape {g.shape} incompatible with input {x.shape}")
    return x * g


def linear(x, w, b=None) -> np.ndarray:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x @ w.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b
    return out


def max_pool2d(x, kernel: int, stride: int, padding: int = 0) -> np.ndarray:
    x = as_tensor(x)
    spec = ConvSpec(x.shape[1], x.shape[1], kernel, kernel, stride, padding)
    spec.output_hw(x.shape[2], x.shape[3])
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def sigmoid(x) -> np.ndarray:
    x = as_tensor(x)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-d sequence of integer class indices")
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ValueError(f"label {labels[bad[0]]} at position {bad[0]} outside [0, {num_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logp = log_softmax(logits)
    if logp.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logp.shape}")
    labels = check_labels(labels, logp.shape[1])
    if labels.shape[0] != logp.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logp.shape[0]} logit rows")
    return float(-logp[np.arange(len(labels)), labels].mean())
