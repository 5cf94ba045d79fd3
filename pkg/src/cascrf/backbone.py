"""Toy five-stage encoder standing in for a pretrained saliency network.

Each stage is a 3x3 convolution, a rectifier, and a 2x halving pool.
Stage outputs are the multi-scale features, indexed so that scale 5 is
the finest (first stage) and scale 1 the coarsest. Every scale also has
a 1x1 side head whose output is bilinearly upsampled to a full
resolution logit map. The side heads double as the refinement blocks'
prediction heads, so the message-free cascade reproduces these maps
exactly.

Parameters live in a flat dict of arrays (float32 by default so
checkpoints round-trip bit-exactly); the forward pass computes in
float64 and keeps the per-stage trace the backward pass needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .convops import avgpool2, avgpool2_backward, conv2d, conv2d_backward, relu, relu_backward
from .core import bilinear_resize, bilinear_resize_adjoint

N_SCALES = 5
DEFAULT_CHANNELS = 16
MIN_SIDE = 8


def init_backbone_params(
    channels: int = DEFAULT_CHANNELS, seed: int = 0, dtype=np.float32
) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform conv weights, zero biases and zero heads.

    Zero heads make every initial side map identically zero; the first
    optimizer step moves the heads, after which the convolutions start
    receiving gradient.
    """
    if channels < 1:
        raise ValueError(f"need at least one channel, got {channels}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = 3
    for stage in range(1, N_SCALES + 1):
        limit = math.sqrt(6.0 / (c_in * 9))
        params[f"conv{stage}_w"] = rng.uniform(
            -limit, limit, size=(channels, c_in, 3, 3)
        ).astype(dtype)
        params[f"conv{stage}_b"] = np.zeros(channels, dtype=dtype)
        c_in = channels
    for scale in range(1, N_SCALES + 1):
        params[f"head{scale}"] = np.zeros(channels, dtype=dtype)
    return params


@dataclass
class BackboneTrace:
    feats: dict        # scale -> (M, h_l, w_l), scale 5 finest
    sides: dict        # scale -> (H, W) full-resolution logits
    stage_in: dict     # stage -> conv input
    pre_act: dict      # stage -> conv output before the rectifier
    height: int
    width: int


def backbone_forward(img: np.ndarray, params: dict) -> BackboneTrace:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    height, width = img.shape[:2]
    if min(height, width) < MIN_SIDE:
        raise ValueError(
            f"image must be at least {MIN_SIDE} pixels on a side to halve "
            f"{N_SCALES} times, got {height}x{width}"
        )
    x = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float64)
    feats, stage_in, pre_act = {}, {}, {}
    for stage in range(1, N_SCALES + 1):
        stage_in[stage] = x
        pre = conv2d(x, params[f"conv{stage}_w"], params[f"conv{stage}_b"])
        pre_act[stage] = pre
        x = avgpool2(relu(pre))
        feats[N_SCALES + 1 - stage] = x
    sides = {}
    for scale in range(1, N_SCALES + 1):
        small = np.tensordot(
            params[f"head{scale}"].astype(np.float64), feats[scale], axes=(0, 0)
        )
        sides[scale] = bilinear_resize(small, height, width)
    return BackboneTrace(feats, sides, stage_in, pre_act, height, width)


def zero_backbone_grads(params: dict) -> dict[str, np.ndarray]:
    return {
        k: np.zeros(v.shape, dtype=np.float64)
        for k, v in params.items()
        if k.startswith(("conv", "head"))
    }


def backbone_backward(
    trace: BackboneTrace,
    params: dict,
    grad_feats: dict | None = None,
    grad_sides: dict | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients from per-scale feature and side
    gradients. Either dict may be sparse or absent; missing scales
    contribute nothing.
    """
    grad_feats = grad_feats or {}
    grad_sides = grad_sides or {}
    grads = zero_backbone_grads(params)
    g_feat = {l: np.zeros_like(trace.feats[l]) for l in range(1, N_SCALES + 1)}
    for scale in range(1, N_SCALES + 1):
        gf = grad_feats.get(scale)
        if gf is not None:
            g_feat[scale] += gf
        gs = grad_sides.get(scale)
        if gs is not None:
            f = trace.feats[scale]
            g_small = bilinear_resize_adjoint(
                np.asarray(gs, dtype=np.float64), f.shape[1], f.shape[2]
            )
            grads[f"head{scale}"] += np.tensordot(g_small, f, axes=([0, 1], [1, 2]))
            g_feat[scale] += (
                params[f"head{scale}"].astype(np.float64)[:, None, None] * g_small[None]
            )
    # walk coarse to fine: stage s consumed the next-finer feature map
    for scale in range(1, N_SCALES + 1):
        stage = N_SCALES + 1 - scale
        pre = trace.pre_act[stage]
        g_act = avgpool2_backward(g_feat[scale], pre.shape[1], pre.shape[2])
        g_pre = relu_backward(g_act, pre)
        g_x, g_w, g_b = conv2d_backward(
            g_pre, trace.stage_in[stage], params[f"conv{stage}_w"], with_bias=True
        )
        grads[f"conv{stage}_w"] += g_w
        grads[f"conv{stage}_b"] += g_b
        if scale < N_SCALES:
            g_feat[scale + 1] += g_x
    return grads
