"""Dense real and complex tensors plus the raw numeric kernels.

Real tensors are plain numpy arrays (f32 for training, f64 for audits).
A complex tensor is a pair of parallel real planes; nothing here or anywhere
else in the library uses numpy's native complex dtypes, so every real-valued
kernel (convolution, pooling, BLAS matmul) is reused verbatim per plane.

This module is deliberately free of autodiff: `phasefort.autodiff` wraps the
same kernels with gradients. Keeping the raw forward here gives the tests an
independent evaluation path.

Tensor wire format CVT1 (checkpoints, fixtures, the client->server feature
payload): magic b"CVT1", u8 dtype tag (0=f32, 1=f64), u8 rank, little-endian
u32 extents, then the row-major payload as little-endian IEEE-754.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised by debug-mode finiteness sweeps when NaN/Inf is detected."""


def assert_finite(x, where: str = "") -> None:
    arrs = (x.re, x.im) if isinstance(x, ComplexTensor) else (np.asarray(x),)
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values detected{' in ' + where if where else ''}")


@dataclass(frozen=True)
class ComplexTensor:
    """Two parallel real planes of identical shape and dtype."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError(f"plane shape mismatch: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    @property
    def dtype(self):
        return self.re.dtype

    def astype(self, dtype) -> "ComplexTensor":
        return ComplexTensor(self.re.astype(dtype), self.im.astype(dtype))


def complex_from(re, im=None, dtype=None) -> ComplexTensor:
    re = np.asarray(re, dtype=dtype)
    im = np.zeros_like(re) if im is None else np.asarray(im, dtype=re.dtype)
    return ComplexTensor(re, im)


def rotate(x: ComplexTensor, theta) -> ComplexTensor:
    """Multiply elementwise by exp(i*theta); magnitudes are preserved.

    `theta` may be a scalar or an array broadcastable against the planes
    (per-batch-item angles are passed as shape (N,1,1,1)).
    """
    theta = np.asarray(theta, dtype=x.dtype)
    if not np.all(np.isfinite(theta)):
        raise ValueError("rotation angle must be finite")
    c, s = np.cos(theta), np.sin(theta)
    return ComplexTensor(x.re * c - x.im * s, x.im * c + x.re * s)


def real_part(x: ComplexTensor) -> np.ndarray:
    return x.re.copy()


def imag_part(x: ComplexTensor) -> np.ndarray:
    return x.im.copy()


def magnitude(x: ComplexTensor) -> np.ndarray:
    return np.sqrt(x.re * x.re + x.im * x.im)


# ---------------------------------------------------------------------------
# convolution / pooling kernels (NCHW layout)
# ---------------------------------------------------------------------------

def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} (stride {stride}, pad {padding}) "
                         f"does not fit input {h}x{w}")
    return oh, ow


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N,C,H,W) -> (N*OH*OW, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N,C,OH,OW,kh,kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back onto the input grid."""
    n, c, h, w = x_shape
    oh, ow = conv_out_hw(h, w, kh, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols[:, :, :, :, ki, kj]
    if padding:
        xp = xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Bias-free cross-correlation of (N,C,H,W) with kernels (F,C,kh,kw)."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"kernel expects {cw} input channels, input has {c}")
    oh, ow = conv_out_hw(h, wd, kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)


def conv2d(x, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Convolution with a real kernel; complex inputs are convolved per plane."""
    if isinstance(x, ComplexTensor):
        return ComplexTensor(conv2d_raw(x.re, w, stride, padding),
                             conv2d_raw(x.im, w, stride, padding))
    return conv2d_raw(np.asarray(x), w, stride, padding)


def pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N,C,OH,OW,window*window) for pooling reductions."""
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} exceeds spatial extent {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.reshape(*win.shape[:4], window * window)


# ---------------------------------------------------------------------------
# CVT1 serialization
# ---------------------------------------------------------------------------

_CVT1_MAGIC = b"CVT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def cvt1_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise ValueError(f"CVT1 stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds CVT1 limit")
    head = _CVT1_MAGIC + struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def cvt1_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != _CVT1_MAGIC:
        raise ValueError("bad CVT1 magic")
    tag, rank = struct.unpack_from("<BB", buf, 4)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown CVT1 dtype tag {tag}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = _DTYPE_TAGS[tag]
    off = 6 + 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(buf) != expected:
        raise ValueError(f"CVT1 payload length {len(buf)} != expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def write_cvt1(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        fp.write(cvt1_bytes(arr))


def read_cvt1(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return cvt1_from_bytes(fp.read())
