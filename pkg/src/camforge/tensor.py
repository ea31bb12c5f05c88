"""Rank-4 float32 tensors and the differentiable primitives built on them.

Tensors are plain ``numpy.ndarray`` objects laid out as (n, c, h, w).
Every function here is pure: inputs are never written to.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionError, GeometryError

DTYPE = np.float32

T4F_MAGIC = b"T4F1"
_T4F_HEADER = struct.Struct("<4s4I")


def tensor4(data, dtype=DTYPE):
    """Return ``data`` as a contiguous rank-4 array, checking its dims."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise DimensionError(f"all tensor dims must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ConvParams:
    weights: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"conv weights must be (out, in, k, k), got {w.shape}")
        if self.bias.shape != (w.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {w.shape[0]} output channels")
        if self.stride < 1 or self.padding < 0:
            raise GeometryError(f"invalid stride {self.stride} / padding {self.padding}")

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2]


@dataclass(frozen=True)
class GradientBundle:
    input_grad: np.ndarray
    weight_grad: np.ndarray | None = None
    bias_grad: np.ndarray | None = None


def conv_output_hw(h, w, kernel, stride, padding):
    """Spatial output size of a convolution, or GeometryError if non-integral."""
    out = []
    for size in (h, w):
        span = size + 2 * padding - kernel
        if span < 0 or span % stride:
            raise GeometryError(
                f"input extent {size} with kernel {kernel}, stride {stride}, "
                f"padding {padding} does not give an integral output size")
        out.append(span // stride + 1)
    return tuple(out)


def conv2d(x, params):
    """Cross-correlation plus per-channel bias.

    Each output element is summed over input channels, then kernel rows,
    then kernel columns, and the bias is added last.
    """
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise DimensionError(
            f"conv2d input {x.shape} incompatible with weights {params.weights.shape}")
    conv_output_hw(x.shape[2], x.shape[3], params.kernel, params.stride, params.padding)
    w = params.weights.astype(x.dtype, copy=False)
    b = params.bias.astype(x.dtype, copy=False)
    return kernels.conv2d_forward(x, w, b, params.stride, params.padding)


def conv2d_backward(x, params, upstream):
    oh, ow = conv_output_hw(x.shape[2], x.shape[3], params.kernel, params.stride, params.padding)
    expected = (x.shape[0], params.out_channels, oh, ow)
    if upstream.shape != expected:
        raise DimensionError(f"upstream {upstream.shape} does not match conv output {expected}")
    w = params.weights.astype(x.dtype, copy=False)
    gx, gw, gb = kernels.conv2d_backward(x, w, upstream.astype(x.dtype, copy=False),
                                         params.stride, params.padding)
    return GradientBundle(gx, gw, gb)


def relu(x):
    return np.where(x > 0, x, np.zeros((), dtype=x.dtype))


def relu_backward(x, upstream):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


def _check_even(x):
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise GeometryError(f"maxpool2 needs even spatial dims, got {x.shape[-2:]}")


def maxpool2(x):
    """2x2 max pooling with stride 2."""
    _check_even(x)
    return kernels.maxpool2_forward(x)[0]


def maxpool2_backward(x, upstream):
    """Route ``upstream`` to each window's argmax; ties go to the lowest row-major index."""
    _check_even(x)
    _, idx = kernels.maxpool2_forward(x)
    return kernels.maxpool2_backward(upstream, idx, x.shape[2], x.shape[3])


def spatial_mean(x):
    """Mean over the last two axes, keeping them as size 1."""
    n, c, h, w = x.shape
    total = x.reshape(n, c, h * w).sum(axis=2, dtype=np.float64)
    return (total / (h * w)).astype(x.dtype).reshape(n, c, 1, 1)


def global_avg_pool(x):
    return spatial_mean(x)


def global_avg_pool_backward(x, upstream):
    n, c, h, w = x.shape
    g = upstream.reshape(n, c, 1, 1) / np.asarray(h * w, dtype=upstream.dtype)
    return np.broadcast_to(g, x.shape).astype(upstream.dtype)


def fully_connected(x, weights, bias):
    """``x @ weights.T + bias``, summed in ascending input index then biased.

    Accepts a single vector (K,) or a batch (N, K).
    """
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None] if single else x
    if weights.ndim != 2 or xb.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"fully_connected input {x.shape} incompatible with weights {weights.shape}")
    w = weights.astype(xb.dtype, copy=False)
    out = np.zeros((xb.shape[0], w.shape[0]), dtype=xb.dtype)
    for k in range(w.shape[1]):
        out += xb[:, k, None] * w[None, :, k]
    out += bias.astype(xb.dtype, copy=False)
    return out[0] if single else out


def fully_connected_backward(x, weights, upstream):
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None] if single else x
    ub = upstream[None] if single else upstream
    if ub.shape != (xb.shape[0], weights.shape[0]):
        raise DimensionError(f"upstream {upstream.shape} does not match output of {weights.shape}")
    gx = (ub @ weights.astype(ub.dtype, copy=False)).astype(xb.dtype)
    gw = (ub.T @ xb).astype(weights.dtype)
    gb = ub.sum(axis=0, dtype=np.float64).astype(weights.dtype)
    return GradientBundle(gx[0] if single else gx, gw, gb)


def softmax(logits):
    """Softmax over the last axis, shifted by the max for stability."""
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[label]))


def cross_entropy_backward(probs, label):
    """Gradient of softmax + cross-entropy with respect to the logits."""
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    g = probs.copy()
    g[label] -= 1
    return g


def _resize_axis_coords(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(x, out_h, out_w):
    """Resize the last two axes with align-corners=False bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"output dims must be >= 1, got {(out_h, out_w)}")
    x = np.asarray(x)
    src = x.astype(np.float64, copy=False)
    y0, y1, fy = _resize_axis_coords(x.shape[-2], out_h)
    x0, x1, fx = _resize_axis_coords(x.shape[-1], out_w)
    top = src[..., y0, :]
    bot = src[..., y1, :]
    a, b = top[..., x0], top[..., x1]
    c, d = bot[..., x0], bot[..., x1]
    fy = fy[:, None]
    out = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    return out.astype(x.dtype)


def minmax_normalize(grid):
    """Scale to [0, 1]; a constant grid maps to all zeros."""
    grid = np.asarray(grid)
    g = grid.astype(np.float64)
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.zeros(grid.shape, dtype=grid.dtype)
    return ((g - lo) / (hi - lo)).astype(grid.dtype)


def t4f_bytes(x):
    x = tensor4(x)
    return _T4F_HEADER.pack(T4F_MAGIC, *x.shape) + x.astype("<f4").tobytes()


def parse_t4f(buf, offset=0):
    """Decode one T4F record from ``buf`` at ``offset``; return (tensor, next offset)."""
    if len(buf) - offset < _T4F_HEADER.size:
        raise ValueError("truncated T4F header")
    magic, n, c, h, w = _T4F_HEADER.unpack_from(buf, offset)
    if magic != T4F_MAGIC:
        raise ValueError(f"bad T4F magic {magic!r}")
    count = n * c * h * w
    start = offset + _T4F_HEADER.size
    end = start + 4 * count
    if count == 0 or len(buf) < end:
        raise ValueError("truncated or empty T4F payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return data.astype(DTYPE).reshape(n, c, h, w), end


def write_t4f(path, x):
    from .io import atomic_write_bytes
    atomic_write_bytes(path, t4f_bytes(x))


def read_t4f(path):
    buf = Path(path).read_bytes()
    x, end = parse_t4f(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after T4F record")
    return x
