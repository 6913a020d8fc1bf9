"""Dense tensor primitives: convolution, im2col, GEMM, pooling, ReLU.

Tensors are ``float32`` numpy arrays of shape ``(channels, height, width)``.
The dense routines here are the reference that every change-based path is
checked against, so the arithmetic order is pinned down:

* ``conv2d_dense`` accumulates taps in the order input channel, kernel row,
  kernel column, starting from 0, and adds the bias last.
* ``gemm`` reduces every output element sequentially over the shared
  dimension in index order.

With the filter-matrix column index ``(c * kh + j) * kw + i`` both orders are
the same, so ``gemm(kernel_matrix(s), im2col(x, s)) + bias`` reproduces
``conv2d_dense(x, s)`` bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def as_tensor3(x, name="x") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=DTYPE)
    if a.ndim != 3:
        raise ShapeError(f"{name}: expected (channels, height, width), got shape {a.shape}")
    if a.size == 0:
        raise ShapeError(f"{name}: empty tensor {a.shape}")
    return a


def output_size(n: int, kernel: int, stride: int, padding: int = 0, ceil_mode: bool = False) -> int:
    """Number of window positions along one axis."""
    span = n + 2 * padding - kernel
    if span < 0:
        return 0
    if ceil_mode:
        out = -(-span // stride) + 1
        # last window must start inside the (left-padded) input
        if (out - 1) * stride >= n + padding:
            out -= 1
        return out
    return span // stride + 1


@dataclass(eq=False)
class ConvSpec:
    """Convolution geometry plus parameters.

    ``weights`` has shape ``(out, in, kh, kw)``; ``bias`` has shape ``(out,)``.
    Padding is symmetric zero padding.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    _kmat: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).reshape(-1)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be 4-D (out, in, kh, kw), got {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} != out_channels {self.weights.shape[0]}")
        if int(self.stride) < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if int(self.padding) < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")
        self.stride = int(self.stride)
        self.padding = int(self.padding)

    @classmethod
    def zeros(cls, in_channels, out_channels, kernel, stride=1, padding=0):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        return cls(np.zeros((out_channels, in_channels, kh, kw), DTYPE),
                   np.zeros(out_channels, DTYPE), stride, padding)

    out_channels = property(lambda self: self.weights.shape[0])
    in_channels = property(lambda self: self.weights.shape[1])
    kernel_h = property(lambda self: self.weights.shape[2])
    kernel_w = property(lambda self: self.weights.shape[3])
    ceil_mode = False

    @property
    def macs_per_pixel(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (output_size(h, self.kernel_h, self.stride, self.padding),
                output_size(w, self.kernel_w, self.stride, self.padding))

    def kernel_matrix(self) -> np.ndarray:
        if self._kmat is None:
            self._kmat = kernel_matrix(self)
        return self._kmat


@dataclass(frozen=True)
class PoolSpec:
    """Max-pooling window; exposes the same geometry attributes as ConvSpec."""

    size: int = 2
    stride: int = 2
    ceil_mode: bool = False
    padding = 0

    kernel_h = property(lambda self: self.size)
    kernel_w = property(lambda self: self.size)

    def __post_init__(self):
        if int(self.size) < 1 or int(self.stride) < 1:
            raise ShapeError(f"pool size and stride must be positive, got {self.size}/{self.stride}")

    def output_hw(self, h, w):
        return (output_size(h, self.size, self.stride, 0, self.ceil_mode),
                output_size(w, self.size, self.stride, 0, self.ceil_mode))


def _checked_output_hw(x: np.ndarray, spec) -> tuple[int, int]:
    ho, wo = spec.output_hw(x.shape[1], x.shape[2])
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} too small for "
                         f"{spec.kernel_h}x{spec.kernel_w} window (stride {spec.stride}, "
                         f"padding {spec.padding})")
    return ho, wo


def kernel_matrix(spec: ConvSpec) -> np.ndarray:
    """Flatten filters to ``K[o, (c*kh + j)*kw + i] = w[o, c, j, i]``."""
    return spec.weights.reshape(spec.out_channels, -1).copy()


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def im2col(x, spec: ConvSpec, selected=None) -> np.ndarray:
    """Build the image matrix X (rows: channel-major kernel taps, cols: pixels).

    ``selected`` is an ``(n, 2)`` array of (row, col) output coordinates; only
    those columns are generated, in the given order. Without it every output
    pixel is used in row-major order. Strided convolutions only generate the
    sampled positions.
    """
    x = as_tensor3(x)
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, conv expects {spec.in_channels}")
    ho, wo = _checked_output_hw(x, spec)
    kh, kw, s = spec.kernel_h, spec.kernel_w, spec.stride
    xp = _pad(x, spec.padding)
    if selected is None:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
        # (C, ho, wo, kh, kw) -> (C, kh, kw, ho, wo)
        return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, ho * wo)
    sel = np.asarray(selected, dtype=np.int64).reshape(-1, 2)
    if sel.size and (sel.min() < 0 or sel[:, 0].max() >= ho or sel[:, 1].max() >= wo):
        raise ShapeError(f"selected index outside the {ho}x{wo} output range")
    rows = sel[:, 0] * s
    cols = sel[:, 1] * s
    jj = np.arange(kh)
    ii = np.arange(kw)
    # (C, kh, kw, n); padded coordinates absorb the -padding offset
    patch = xp[:, jj[:, None, None] + rows[None, None, :], ii[None, :, None] + cols[None, None, :]]
    return patch.reshape(-1, sel.shape[0])


@numba.njit(cache=True, nogil=True)
def _gemm_kernel(K, X, Y):
    m, kdim = K.shape
    n = X.shape[1]
    for o in range(m):
        for k in range(kdim):
            a = K[o, k]
            for p in range(n):
                Y[o, p] += a * X[k, p]


def gemm(K, X) -> np.ndarray:
    """``Y = K @ X`` in float32 with a fixed per-element reduction order."""
    K = np.ascontiguousarray(K, dtype=DTYPE)
    X = np.ascontiguousarray(X, dtype=DTYPE)
    if K.ndim != 2 or X.ndim != 2 or K.shape[1] != X.shape[0]:
        raise ShapeError(f"gemm shape mismatch: {K.shape} x {X.shape}")
    Y = np.zeros((K.shape[0], X.shape[1]), DTYPE)
    if Y.size and K.shape[1]:
        _gemm_kernel(K, X, Y)
    return Y


def conv2d_dense(x, spec: ConvSpec) -> np.ndarray:
    """Direct convolution with zero padding (no im2col, no GEMM)."""
    x = as_tensor3(x)
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[0]} channels, conv expects {spec.in_channels}")
    ho, wo = _checked_output_hw(x, spec)
    s = spec.stride
    xp = _pad(x, spec.padding)
    w = spec.weights
    y = np.zeros((spec.out_channels, ho, wo), DTYPE)
    tmp = np.empty_like(y)
    for c in range(spec.in_channels):
        for j in range(spec.kernel_h):
            for i in range(spec.kernel_w):
                tap = xp[c, j : j + (ho - 1) * s + 1 : s, i : i + (wo - 1) * s + 1 : s]
                np.multiply(w[:, c, j, i, None, None], tap[None], out=tmp)
                y += tmp
    y += spec.bias[:, None, None]
    return y


def conv2d_gemm(x, spec: ConvSpec) -> np.ndarray:
    """Full-frame convolution through im2col + gemm (the fast dense path)."""
    x = as_tensor3(x)
    ho, wo = _checked_output_hw(x, spec)
    y = gemm(spec.kernel_matrix(), im2col(x, spec))
    y += spec.bias[:, None]
    return y.reshape(spec.out_channels, ho, wo)


def maxpool_dense(x, size: int = 2, stride: int | None = None, ceil_mode: bool = False) -> np.ndarray:
    x = as_tensor3(x)
    pool = PoolSpec(size, size if stride is None else stride, ceil_mode)
    if pool.stride < 1 or pool.size < 1:
        raise ShapeError("pool size and stride must be positive")
    ho, wo = _checked_output_hw(x, pool)
    s = pool.stride
    need_h = (ho - 1) * s + size
    need_w = (wo - 1) * s + size
    if need_h > x.shape[1] or need_w > x.shape[2]:
        x = np.pad(x, ((0, 0), (0, max(0, need_h - x.shape[1])), (0, max(0, need_w - x.shape[2]))),
                   constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(1, 2))
    return np.ascontiguousarray(win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s].max(axis=(3, 4)))


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), DTYPE(0))


def rel_error(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute error when ``b`` is all zero)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    scale = float(np.max(np.abs(b)))
    err = float(np.max(np.abs(a - b)))
    return err / scale if scale > 0 else err
