"""Minimal conv/pool/activation primitives with hand-written backwards.

All feature tensors are (C, H, W).  Convolutions use odd square kernels
with 'same' zero padding and stride 1; the kernel layout is
(C_out, C_in, k, k).  Backward passes are exact adjoints of the
forwards, which keeps finite-difference checks tight.
"""

from __future__ import annotations

import numpy as np


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ValueError(f"kernel expects {k_in} input channels, got {c_in}")
    if kh != kw or kh % 2 != 1:
        raise ValueError(f"kernel must be odd and square, got {kh}x{kw}")
    pad = kh // 2
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    y = np.zeros((c_out, h, w), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            y += np.tensordot(kernel[:, :, di, dj], xp[:, di : di + h, dj : dj + w], axes=(1, 0))
    if bias is not None:
        y += bias[:, None, None]
    return y


def conv2d_backward(
    grad_y: np.ndarray, x: np.ndarray, kernel: np.ndarray, with_bias: bool = False
):
    """Gradients of conv2d w.r.t. input, kernel, and optionally bias."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    pad = kh // 2
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel)
    for di in range(kh):
        for dj in range(kw):
            window = xp[:, di : di + h, dj : dj + w]
            grad_k[:, :, di, dj] = np.tensordot(grad_y, window, axes=([1, 2], [1, 2]))
            grad_xp[:, di : di + h, dj : dj + w] += np.tensordot(
                kernel[:, :, di, dj], grad_y, axes=(0, 0)
            )
    grad_x = grad_xp[:, pad : pad + h, pad : pad + w]
    if with_bias:
        return grad_x, grad_k, grad_y.sum(axis=(1, 2))
    return grad_x, grad_k


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pool, stride 2, ceil mode: edge cells average what exists."""
    c, h, w = x.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    acc = np.zeros((c, oh, ow), dtype=x.dtype)
    cnt = np.zeros((oh, ow), dtype=x.dtype)
    for di in range(2):
        for dj in range(2):
            part = x[:, di::2, dj::2]
            acc[:, : part.shape[1], : part.shape[2]] += part
            cnt[: part.shape[1], : part.shape[2]] += 1
    return acc / cnt


def avgpool2_backward(grad_y: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    c, oh, ow = grad_y.shape
    cnt = np.zeros((oh, ow), dtype=grad_y.dtype)
    for di in range(2):
        for dj in range(2):
            sh = len(range(di, in_h, 2))
            sw = len(range(dj, in_w, 2))
            cnt[:sh, :sw] += 1
    g = grad_y / cnt
    grad_x = np.zeros((c, in_h, in_w), dtype=grad_y.dtype)
    for di in range(2):
        for dj in range(2):
            sh = len(range(di, in_h, 2))
            sw = len(range(dj, in_w, 2))
            grad_x[:, di::2, dj::2] = g[:, :sh, :sw]
    return grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_y, 0.0)
