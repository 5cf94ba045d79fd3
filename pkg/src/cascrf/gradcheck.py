"""Central finite-difference verification of every analytic gradient.

All checks build a deterministic random instance, compute gradients of
a fixed random projection of the output, and compare against central
differences with realized step sizes (parameters are float32, so the
actually-applied perturbation is measured rather than assumed).
"""

from __future__ import annotations

import numpy as np

from .backbone import backbone_backward, backbone_forward, init_backbone_params
from .cascade import (
    build_cascade_operators,
    cascade_backward,
    cascade_forward,
    init_cascade_model,
)
from .crf import (
    CrfBlockParams,
    build_block_operators,
    crf_block_backward,
    crf_block_forward,
)

TOLERANCE = 1e-3


def fd_tensor(fn, arr, step=1e-3) -> np.ndarray:
    """Central differences over every element, using the realized step."""
    g = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        hi = float(arr[idx])
        fp = fn()
        arr[idx] = orig - step
        lo = float(arr[idx])
        fm = fn()
        arr[idx] = orig
        g[idx] = (fp - fm) / (hi - lo)
    return g


def rel_err(a, b) -> float:
    # The floor keeps identically-zero gradients honest: degenerate
    # instances (constant observations reach an exact fixed point, so
    # the smoothing weights have no effect) leave central differences
    # measuring rounding noise near 1e-11 on an O(1) loss.  1e-6 sits
    # well above that noise and well below any live gradient here.
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def _live_block_params(channels: int, iters: int, rng) -> CrfBlockParams:
    limit = np.sqrt(6.0 / (channels * 9.0))
    shape = (channels, channels, 3, 3)
    return CrfBlockParams(
        ff_kernel=rng.uniform(-limit, limit, shape).astype(np.float32),
        fs_kernel=rng.uniform(-limit, limit, shape).astype(np.float32),
        msg_scale=(rng.standard_normal(channels) * 0.3).astype(np.float32),
        head_kernel=(rng.standard_normal(channels) * 0.5).astype(np.float32),
        similarity_weight=np.array(0.2, dtype=np.float32),
        proximity_weight=np.array(0.15, dtype=np.float32),
        space_sigma=60.0,
        color_sigma=5.0,
        prox_sigma=3.0,
        mf_iters=iters,
    )


def block_gradcheck(size: int = 8, channels: int = 4, iters: int = 3, seed: int = 0) -> dict:
    """Relative FD error for every block parameter and every input."""
    rng = np.random.default_rng(seed)
    p = _live_block_params(channels, iters, rng)
    img = rng.random((size, size, 3))
    ops = build_block_operators(img, p)
    f_l = rng.standard_normal((channels, size // 2, size // 2))
    h_prev = rng.standard_normal((channels, size // 4 or 1, size // 4 or 1))
    o_prev = rng.standard_normal((size, size)) * 0.5
    probe_o = rng.standard_normal((size, size))
    probe_h = rng.standard_normal(f_l.shape)

    def loss():
        out = crf_block_forward(f_l, h_prev, o_prev, p, ops=ops)
        return float((probe_o * out.o).sum() + (probe_h * out.h).sum())

    out = crf_block_forward(f_l, h_prev, o_prev, p, ops=ops)
    g_f, g_h, g_o, grads = crf_block_backward(
        out, probe_o, probe_h, (f_l, h_prev, o_prev), p
    )
    errs = {}
    for name, g in grads.items():
        errs[name] = rel_err(g, fd_tensor(loss, getattr(p, name)))
    for name, arr, g in (("f_l", f_l, g_f), ("h_prev", h_prev, g_h), ("o_prev", o_prev, g_o)):
        errs[name] = rel_err(g, fd_tensor(loss, arr, step=1e-5))
    return errs


def _margin_seeded_backbone(size: int, channels: int, seed: int):
    """Instance whose pre-activations all clear the FD probe radius, so
    no difference quotient straddles a rectifier kink."""
    for attempt in range(64):
        rng = np.random.default_rng(seed + 1000 * attempt)
        img = rng.random((size, size, 3))
        params = init_backbone_params(channels=channels, seed=seed + 1000 * attempt)
        for l in range(1, 6):
            params[f"head{l}"] = rng.standard_normal(channels).astype(np.float32)
            params[f"conv{l}_b"] += (rng.random(channels) * 0.5 + 0.1).astype(np.float32)
        trace = backbone_forward(img, params)
        margin = min(np.abs(pre).min() for pre in trace.pre_act.values())
        if margin > 5e-3:
            return img, params, rng
    raise RuntimeError("no kink-free backbone instance found")


def backbone_gradcheck(size: int = 16, channels: int = 3, seed: int = 0) -> dict:
    """Relative FD error for every encoder weight, bias, and head."""
    img, params, rng = _margin_seeded_backbone(size, channels, seed)
    trace = backbone_forward(img, params)
    probe_side = {l: rng.standard_normal((size, size)) for l in range(1, 6)}
    probe_feat = {l: rng.standard_normal(trace.feats[l].shape) for l in (2, 5)}

    def loss():
        t = backbone_forward(img, params)
        total = sum((probe_side[l] * t.sides[l]).sum() for l in probe_side)
        total += sum((probe_feat[l] * t.feats[l]).sum() for l in probe_feat)
        return float(total)

    grads = backbone_backward(trace, params, grad_feats=probe_feat, grad_sides=probe_side)
    return {k: rel_err(grads[k], fd_tensor(loss, params[k], step=1e-4)) for k in grads}


def _margin_seeded_model(size: int, channels: int, iters: int, seed: int):
    for attempt in range(64):
        rng = np.random.default_rng(seed + 1000 * attempt)
        model = init_cascade_model(channels=channels, seed=seed + 1000 * attempt)
        for l in range(1, 6):
            model.params[f"head{l}"][:] = rng.standard_normal(channels) * 0.4
            model.params[f"conv{l}_b"] += (rng.random(channels) * 0.5 + 0.1).astype(np.float32)
            if l >= 2:
                model.params[f"block{l}_scale"][:] = rng.standard_normal(channels) * 0.2
        cfg = {k: type(v)(
            space_sigma=v.space_sigma, color_sigma=v.color_sigma,
            prox_sigma=v.prox_sigma, mf_iters=iters, messages=v.messages)
            for k, v in model.config.settings.items()}
        model.config = type(model.config)(settings=cfg)
        img = rng.random((size, size, 3))
        trace = backbone_forward(img, model.params)
        margin = min(np.abs(pre).min() for pre in trace.pre_act.values())
        if margin > 5e-3:
            return img, model, rng
    raise RuntimeError("no kink-free model instance found")


def full_gradcheck(size: int = 8, channels: int = 4, iters: int = 2, seed: int = 0) -> dict:
    """End-to-end FD on the whole model: encoder into cascade, every
    parameter tensor in the registry."""
    img, model, rng = _margin_seeded_model(size, channels, iters, seed)
    ops = build_cascade_operators(img, model)
    probe = rng.standard_normal((size, size))

    def loss():
        bt = backbone_forward(img, model.params)
        tr = cascade_forward(bt.feats, bt.sides, img, model, ops=ops)
        return float((probe * tr.o[model.n_scales]).sum())

    bt = backbone_forward(img, model.params)
    tr = cascade_forward(bt.feats, bt.sides, img, model, ops=ops)
    block_grads, grad_feats, grad_preds = cascade_backward(tr, probe, model)
    backbone_grads = backbone_backward(
        bt, model.params, grad_feats=grad_feats, grad_sides={1: grad_preds[1]}
    )
    grads = dict(backbone_grads)
    for k, g in block_grads.items():
        grads[k] = grads[k] + g if k in grads else g
    return {k: rel_err(grads[k], fd_tensor(loss, model.params[k], step=1e-4))
            for k in grads}


def run_gradcheck(size: int = 8, channels: int = 4, iters: int = 2, seed: int = 0) -> dict:
    """All three suites; keys are qualified as suite/tensor."""
    report = {}
    for name, errs in (
        ("block", block_gradcheck(size, channels, iters, seed)),
        ("backbone", backbone_gradcheck(max(size, 16), 3, seed)),
        ("full", full_gradcheck(size, channels, iters, seed)),
    ):
        for k, e in errs.items():
            report[f"{name}/{k}"] = e
    return report
