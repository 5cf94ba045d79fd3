"""Numeric plumbing shared across the package.

Array conventions:
    images           float arrays, shape (H, W, 3), values in [0, 1]
    feature maps     (C, H, W) at a scale's native resolution
    prediction maps  (H, W) holding unbounded logits; the logistic is
                     applied only inside losses, metrics, and final output
    binary masks     (H, W) with values exactly 0 or 1

The tensor file format is a little-endian container: a 5-byte magic
``UCRF1``, a u8 rank, ``rank`` u32 dimensions, then the payload as
float32 values in C order.
"""

from __future__ import annotations

import functools
import struct
from pathlib import Path

import numpy as np
from PIL import Image

TENSOR_MAGIC = b"UCRF1"

_MAX_RANK = 8


def ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{what} contains non-finite values")


def sigmoid(x):
    """Numerically stable elementwise logistic function."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def logit(p, eps: float = 1e-6):
    """Inverse logistic with clamping into [eps, 1 - eps].

    Args:
        p: probabilities, any shape.
        eps: clamp margin; must lie in (0, 0.5).

    Returns:
        Array of logits with the same shape as ``p``.
    """
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def _axis_plan(n_in: int, n_out: int):
    # Half-pixel-center source coordinates (the align_corners=False
    # convention), clamped so every sample stays inside the grid.
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, float(n_in - 1))
    if n_in == 1:
        lo = np.zeros(n_out, dtype=np.intp)
    else:
        lo = np.minimum(pos.astype(np.intp), n_in - 2)
    frac = pos - lo
    return lo, frac


@functools.lru_cache(maxsize=512)
def _resize_plan(in_h: int, in_w: int, out_h: int, out_w: int):
    ylo, fy = _axis_plan(in_h, out_h)
    xlo, fx = _axis_plan(in_w, out_w)
    for a in (ylo, fy, xlo, fx):
        a.setflags(write=False)
    return ylo, fy, xlo, fx


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (H, W) or (C, H, W) array.

    Sampling uses half-pixel centers, so resizing to the same shape is
    an exact copy and constant inputs stay constant.  Implemented as
    nested linear interpolation, which keeps outputs inside the input's
    value range.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    a = np.asarray(arr)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) array, got shape {a.shape}")
    _, h, w = a.shape
    if (h, w) == (out_h, out_w):
        out = a.copy()
    else:
        ylo, fy, xlo, fx = _resize_plan(h, w, out_h, out_w)
        yhi = np.minimum(ylo + 1, h - 1)
        xhi = np.minimum(xlo + 1, w - 1)
        a00 = a[:, ylo[:, None], xlo[None, :]]
        a01 = a[:, ylo[:, None], xhi[None, :]]
        a10 = a[:, yhi[:, None], xlo[None, :]]
        a11 = a[:, yhi[:, None], xhi[None, :]]
        fxr = fx[None, None, :]
        top = a00 + fxr * (a01 - a00)
        bot = a10 + fxr * (a11 - a10)
        out = top + fy[None, :, None] * (bot - top)
        out = out.astype(a.dtype, copy=False)
    return out[0] if squeeze else out


def bilinear_resize_adjoint(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of :func:`bilinear_resize` back onto an (in_h, in_w) grid.

    Used to push gradients through upsampling; the forward map is linear
    so the adjoint just scatters each output gradient onto the four
    source corners with the interpolation weights.
    """
    g = np.asarray(grad)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[None]
    c, out_h, out_w = g.shape
    if (in_h, in_w) == (out_h, out_w):
        res = g.copy()
        return res[0] if squeeze else res
    ylo, fy, xlo, fx = _resize_plan(in_h, in_w, out_h, out_w)
    yhi = np.minimum(ylo + 1, in_h - 1)
    xhi = np.minimum(xlo + 1, in_w - 1)
    w00 = np.outer(1.0 - fy, 1.0 - fx)
    w01 = np.outer(1.0 - fy, fx)
    w10 = np.outer(fy, 1.0 - fx)
    w11 = np.outer(fy, fx)
    i00 = (ylo[:, None] * in_w + xlo[None, :]).ravel()
    i01 = (ylo[:, None] * in_w + xhi[None, :]).ravel()
    i10 = (yhi[:, None] * in_w + xlo[None, :]).ravel()
    i11 = (yhi[:, None] * in_w + xhi[None, :]).ravel()
    idx = np.concatenate([i00, i01, i10, i11])
    res = np.empty((c, in_h * in_w), dtype=np.float64)
    for ch in range(c):
        gw = np.concatenate([
            (g[ch] * w00).ravel(),
            (g[ch] * w01).ravel(),
            (g[ch] * w10).ravel(),
            (g[ch] * w11).ravel(),
        ])
        res[ch] = np.bincount(idx, weights=gw, minlength=in_h * in_w)
    res = res.reshape(c, in_h, in_w).astype(g.dtype, copy=False)
    return res[0] if squeeze else res


def write_tensor(path, arr: np.ndarray) -> None:
    """Serialize an array to the UCRF1 container (float32 payload)."""
    a = np.ascontiguousarray(arr, dtype=np.float32)
    ensure_finite(a, "tensor")
    if a.ndim < 1 or a.ndim > _MAX_RANK:
        raise ValueError(f"tensor rank must be 1..{_MAX_RANK}, got {a.ndim}")
    header = TENSOR_MAGIC + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a UCRF1 container back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < len(TENSOR_MAGIC) + 1 or raw[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise ValueError(f"bad magic in tensor file {path}")
    rank = raw[len(TENSOR_MAGIC)]
    if rank < 1 or rank > _MAX_RANK:
        raise ValueError(f"bad tensor rank {rank} in {path}")
    off = len(TENSOR_MAGIC) + 1
    if len(raw) < off + 4 * rank:
        raise ValueError(f"truncated tensor header in {path}")
    dims = struct.unpack_from(f"<{rank}I", raw, off)
    off += 4 * rank
    count = 1
    for d in dims:
        count *= int(d)
    if len(raw) - off < 4 * count:
        raise ValueError(f"truncated tensor payload in {path}")
    if len(raw) - off > 4 * count:
        raise ValueError(f"trailing bytes after tensor payload in {path}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).astype(np.float32, copy=True)


def load_image(path) -> np.ndarray:
    """Read an 8-bit image file as (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """Read a ground-truth mask as a binary (H, W) float32 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)


def save_image(path, img: np.ndarray) -> None:
    a = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray(np.rint(a * 255.0).astype(np.uint8)).save(path)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) >= 0.5).astype(np.uint8) * 255, mode="L").save(path)


def saliency_to_uint8(logits: np.ndarray) -> np.ndarray:
    """Quantize a logit map to the 8-bit saliency convention."""
    return np.rint(255.0 * sigmoid(np.asarray(logits, dtype=np.float64))).astype(np.uint8)


def save_saliency(path, logits: np.ndarray) -> None:
    """Write a logit prediction map as an 8-bit grayscale PNG."""
    Image.fromarray(saliency_to_uint8(logits), mode="L").save(path)


def load_saliency_uint8(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()
