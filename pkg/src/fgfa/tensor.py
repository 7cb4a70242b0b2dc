"""Dense tensors, convolution and the ``.fgt`` binary tensor format.

Tensors are plain ``numpy.ndarray`` objects in row-major ``[C, H, W]`` layout
(flows are ``[2, H, W]``). Arithmetic runs in float64; files store float32.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, TensorFormatError

MAGIC = b"FGT1"
DTYPE_FLOAT32 = 0
MAX_RANK = 4

COMPUTE_DTYPE = np.float64


def as_tensor(x, name="tensor", rank=None) -> np.ndarray:
    """Return ``x`` as a float64 array, checking rank and extents."""
    arr = np.asarray(x, dtype=COMPUTE_DTYPE)
    if rank is not None and arr.ndim != rank:
        raise ConfigError(f"{name} must have rank {rank}, got shape {arr.shape}")
    if arr.ndim > MAX_RANK:
        raise ConfigError(f"{name} rank {arr.ndim} exceeds {MAX_RANK}")
    if any(d < 1 for d in arr.shape):
        raise ConfigError(f"{name} has an empty extent: {arr.shape}")
    return arr


def conv_output_size(n: int, stride: int) -> int:
    return -(-n // stride)


def _pad_amounts(k: int, dilation: int) -> int:
    return dilation * (k - 1) // 2


def _check_conv_args(x, kernel, bias, stride, dilation):
    if x.ndim != 3:
        raise ConfigError(f"conv2d input must be [C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ConfigError(f"conv2d kernel must be [C_out,C,kh,kw], got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[0]} channels, kernel expects {c_in}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise ConfigError("stride and dilation must be positive")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigError(f"bias must have shape ({c_out},), got {bias.shape}")


def _im2col(x, kh, kw, stride, dilation):
    """``[C*kh*kw, H'*W']`` patch matrix; row order matches ``kernel.reshape(C_out, -1)``."""
    c, h, w = x.shape
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)
    if kh == 1 and kw == 1:
        return x[:, ::stride, ::stride].reshape(c, ho * wo)
    ph, pw = _pad_amounts(kh, dilation), _pad_amounts(kw, dilation)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=COMPUTE_DTYPE)
    xp[:, ph : ph + h, pw : pw + w] = x
    cols = np.empty((c, kh, kw, ho, wo), dtype=COMPUTE_DTYPE)
    for a in range(kh):
        for b in range(kw):
            y0, x0 = a * dilation, b * dilation
            cols[:, a, b] = xp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _col2im(cols, shape, kh, kw, stride, dilation):
    c, h, w = shape
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)
    if kh == 1 and kw == 1:
        out = np.zeros(shape, dtype=COMPUTE_DTYPE)
        out[:, ::stride, ::stride] = cols.reshape(c, ho, wo)
        return out
    ph, pw = _pad_amounts(kh, dilation), _pad_amounts(kw, dilation)
    gxp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=COMPUTE_DTYPE)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for a in range(kh):
        for b in range(kw):
            y0, x0 = a * dilation, b * dilation
            gxp[:, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride] += cols[:, a, b]
    return gxp[:, ph : ph + h, pw : pw + w].copy()


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Zero same-padded 2-D cross-correlation.

    Args:
        x: input ``[C, H, W]``.
        kernel: ``[C_out, C, kh, kw]`` with odd kh, kw.
        bias: ``[C_out]`` or None.
        stride: output ``H' = ceil(H / stride)``.
        dilation: spacing between kernel taps.
    """
    x = as_tensor(x, "input")
    kernel = as_tensor(kernel, "kernel")
    bias = None if bias is None else np.asarray(bias, dtype=COMPUTE_DTYPE)
    _check_conv_args(x, kernel, bias, stride, dilation)
    c_out, _, kh, kw = kernel.shape
    ho, wo = conv_output_size(x.shape[1], stride), conv_output_size(x.shape[2], stride)
    out = kernel.reshape(c_out, -1) @ _im2col(x, kh, kw, stride, dilation)
    if bias is not None:
        out += bias[:, None]
    return out.reshape(c_out, ho, wo)


def conv2d_backward(x, kernel, grad_out, stride: int = 1, dilation: int = 1):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    x = as_tensor(x, "input")
    kernel = as_tensor(kernel, "kernel")
    grad_out = np.asarray(grad_out, dtype=COMPUTE_DTYPE)
    _check_conv_args(x, kernel, None, stride, dilation)
    c_out, _, kh, kw = kernel.shape
    ho, wo = conv_output_size(x.shape[1], stride), conv_output_size(x.shape[2], stride)
    if grad_out.shape != (c_out, ho, wo):
        raise ConfigError(f"upstream gradient shape {grad_out.shape} != {(c_out, ho, wo)}")
    g = grad_out.reshape(c_out, -1)
    cols = _im2col(x, kh, kw, stride, dilation)
    gk = (g @ cols.T).reshape(kernel.shape)
    gx = _col2im(kernel.reshape(c_out, -1).T @ g, x.shape, kh, kw, stride, dilation)
    return gx, gk, g.sum(axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(pre > 0.0, grad, 0.0)


# ---------------------------------------------------------------------------
# .fgt file format: "FGT1" | dtype u8 | rank u8 | dims u32 LE * rank | payload


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ConfigError(f"can only serialize rank 1..{MAX_RANK} tensors, got {arr.ndim}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<BB", DTYPE_FLOAT32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + data.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise TensorFormatError("truncated header")
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    dtype, rank = struct.unpack_from("<BB", buf, 4)
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if rank < 1 or rank > MAX_RANK:
        raise TensorFormatError(f"unsupported rank {rank}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    expected = int(np.prod(dims)) * 4
    payload = buf[off:]
    if len(payload) < expected:
        raise TensorFormatError("truncated payload")
    if len(payload) > expected:
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def write_tensor(path, t) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_tensor(t))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    """Read a ``.fgt`` file as a float32 array."""
    return decode_tensor(Path(path).read_bytes())
