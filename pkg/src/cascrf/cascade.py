"""Multi-scale cascade of refinement blocks.

Scale 1 is the coarsest and has no block; refinement runs at scales
2..L, each block consuming its own features plus the previous scale's
estimated features and fused prediction.  Checkpoints are a directory
of tensor files plus a plain-text manifest so they stay inspectable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import N_SCALES, init_backbone_params
from .core import read_tensor, write_tensor
from .crf import (
    ALL_MESSAGES,
    CrfBlockParams,
    build_block_operators,
    crf_block_backward,
    crf_block_forward,
)

CHECKPOINT_FORMAT = 1
MANIFEST_NAME = "manifest.txt"

# per-block tensors in the parameter registry; head{l} is shared with
# the backbone side head so block and baseline stay the same function
BLOCK_KEYS = ("ff", "fs", "scale", "sim", "prox")


@dataclass(frozen=True)
class ScaleSettings:
    """Kernel bandwidths and iteration budget for one block."""

    space_sigma: float
    color_sigma: float
    prox_sigma: float
    mf_iters: int = 3
    messages: frozenset = ALL_MESSAGES

    def validate(self) -> None:
        if min(self.space_sigma, self.color_sigma, self.prox_sigma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.mf_iters < 1:
            raise ValueError("mean-field needs at least one iteration")
        if not self.messages <= ALL_MESSAGES:
            raise ValueError(f"unknown message types {set(self.messages) - set(ALL_MESSAGES)}")


@dataclass(frozen=True)
class ScaleConfig:
    """Per-scale settings for every block (scales 2..L)."""

    settings: dict

    def scale(self, l: int) -> ScaleSettings:
        if l not in self.settings:
            top = max(self.settings) if self.settings else 1
            raise ValueError(f"no block at scale {l}; blocks cover scales 2..{top}")
        return self.settings[l]

    def validate(self) -> None:
        for s in self.settings.values():
            s.validate()


def default_scale_config(n_scales: int = N_SCALES) -> ScaleConfig:
    """Wide color-tight kernels on the coarse scales, a tight spatially
    local but color-tolerant kernel on the finest.

    The coarse blocks chase appearance similarity, the last block
    mostly smooths locally.
    """
    coarse = ScaleSettings(space_sigma=60.0, color_sigma=5.0, prox_sigma=3.0)
    finest = ScaleSettings(space_sigma=1.0, color_sigma=10.0, prox_sigma=10.0)
    settings = {l: coarse for l in range(2, n_scales)}
    settings[n_scales] = finest
    return ScaleConfig(settings=settings)


@dataclass
class CascadeModel:
    """Parameter registry plus wiring info.

    ``params`` maps flat names to float32 arrays; ``block(l)`` hands out
    views that alias the registry, so in-place optimizer updates are
    seen by every consumer.
    """

    n_scales: int
    channels: int
    params: dict
    config: ScaleConfig

    def block(self, l: int) -> CrfBlockParams:
        s = self.config.scale(l)
        p = self.params
        return CrfBlockParams(
            ff_kernel=p[f"block{l}_ff"],
            fs_kernel=p[f"block{l}_fs"],
            msg_scale=p[f"block{l}_scale"],
            head_kernel=p[f"head{l}"],
            similarity_weight=p[f"block{l}_sim"],
            proximity_weight=p[f"block{l}_prox"],
            space_sigma=s.space_sigma,
            color_sigma=s.color_sigma,
            prox_sigma=s.prox_sigma,
            mf_iters=s.mf_iters,
        )

    def block_messages(self, l: int) -> frozenset:
        return self.config.scale(l).messages


def init_cascade_model(
    channels: int = 16,
    seed: int = 0,
    config: ScaleConfig | None = None,
) -> CascadeModel:
    """Backbone plus blocks in one registry.

    Message kernels start random and their per-channel scales start at
    a small constant.  The scale gates the kernel gradients, so a zero
    start would leave the kernels learning at a crawl; 0.1 keeps the
    initial message contribution mild while letting both sides train
    from the first step.  Smoothing weights start small and positive.
    """
    if config is None:
        config = default_scale_config()
    config.validate()
    params = init_backbone_params(channels=channels, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    limit = np.sqrt(6.0 / (channels * 9.0))
    for l in range(2, N_SCALES + 1):
        shape = (channels, channels, 3, 3)
        params[f"block{l}_ff"] = rng.uniform(-limit, limit, shape).astype(np.float32)
        params[f"block{l}_fs"] = rng.uniform(-limit, limit, shape).astype(np.float32)
        params[f"block{l}_scale"] = np.full(channels, 0.1, dtype=np.float32)
        params[f"block{l}_sim"] = np.array(0.1, dtype=np.float32)
        params[f"block{l}_prox"] = np.array(0.1, dtype=np.float32)
    return CascadeModel(
        n_scales=N_SCALES, channels=channels, params=params, config=config
    )


def build_cascade_operators(img: np.ndarray, model: CascadeModel, **lattice_kwargs):
    """Pairwise operators per scale, deduplicated by bandwidth triple.

    With the default config scales 2..4 share one operator pair, so the
    expensive bilateral structure is built once per image.
    """
    ops: dict = {}
    by_key: dict = {}
    for l in range(2, model.n_scales + 1):
        p = model.block(l)
        key = (p.space_sigma, p.color_sigma, p.prox_sigma)
        if key not in by_key:
            by_key[key] = build_block_operators(img, p, **lattice_kwargs)
        ops[l] = by_key[key]
    return ops


@dataclass
class CascadeTrace:
    """Everything the reverse pass needs, keyed by scale."""

    features: dict
    predictions: dict
    h: dict
    o: dict
    blocks: dict = field(repr=False)


def _check_scale_maps(maps: dict, n_scales: int, what: str) -> None:
    want = set(range(1, n_scales + 1))
    if set(maps) != want:
        raise ValueError(f"{what} must cover scales 1..{n_scales}, got {sorted(maps)}")


def cascade_forward(
    features: dict,
    predictions: dict,
    img: np.ndarray | None,
    model: CascadeModel,
    ops: dict | None = None,
    messages_override: frozenset | None = None,
) -> CascadeTrace:
    """Run every block coarse to fine.

    ``features[l]`` is (M, h_l, w_l) at native resolution,``predictions[l]``
    a full-resolution logit map.  Scale 1 passes straight through; block
    l then consumes (f^l, h^{l-1}, o^{l-1}).  ``messages_override``
    replaces the per-scale message sets wholesale, which is how the
    ablation modes are run.
    """
    n = model.n_scales
    _check_scale_maps(features, n, "features")
    _check_scale_maps(predictions, n, "predictions")
    full = predictions[1].shape
    for l, s in predictions.items():
        if s.shape != full:
            raise ValueError(
                f"prediction maps must share one resolution, scale {l} "
                f"has {s.shape} vs {full}"
            )
    for l, f in features.items():
        if f.ndim != 3 or f.shape[0] != model.channels:
            raise ValueError(
                f"features at scale {l} must be ({model.channels}, h, w), "
                f"got {f.shape}"
            )

    def smooths(l: int) -> bool:
        msgs = messages_override if messages_override is not None else model.block_messages(l)
        p = model.block(l)
        return "ss" in msgs and (
            float(p.similarity_weight) != 0.0 or float(p.proximity_weight) != 0.0
        )

    if ops is None and img is not None and any(smooths(l) for l in range(2, n + 1)):
        ops = build_cascade_operators(img, model)

    h = {1: features[1]}
    o = {1: predictions[1]}
    blocks: dict = {}
    for l in range(2, n + 1):
        msgs = messages_override if messages_override is not None else model.block_messages(l)
        blocks[l] = crf_block_forward(
            features[l],
            h[l - 1],
            o[l - 1],
            model.block(l),
            ops=None if ops is None else ops.get(l),
            messages=frozenset(msgs),
        )
        h[l] = blocks[l].h
        o[l] = blocks[l].o
    return CascadeTrace(features=features, predictions=predictions, h=h, o=o, blocks=blocks)


def cascade_backward(trace: CascadeTrace, grad_final: np.ndarray, model: CascadeModel):
    """Reverse the cascade given d loss / d o^L.

    Returns (param_grads, grad_features, grad_predictions).  Parameter
    gradients are registry-keyed float64.  Only scale 1's prediction
    receives gradient: later scales enter through their block's head,
    not through the prediction inputs.
    """
    n = model.n_scales
    if set(trace.blocks) != set(range(2, n + 1)):
        raise ValueError("trace does not match the model's scale count")
    param_grads: dict = {}
    grad_features: dict = {}
    g_o = np.asarray(grad_final, dtype=np.float64)
    if g_o.shape != trace.o[n].shape:
        raise ValueError(f"grad has shape {g_o.shape}, output is {trace.o[n].shape}")
    g_h: np.ndarray | None = None
    for l in range(n, 1, -1):
        inputs = (trace.features[l], trace.h[l - 1], trace.o[l - 1])
        g_f, g_h, g_o, grads = crf_block_backward(
            trace.blocks[l], g_o, g_h, inputs, model.block(l)
        )
        grad_features[l] = g_f
        for short, name in zip(BLOCK_KEYS, ("ff_kernel", "fs_kernel", "msg_scale",
                                            "similarity_weight", "proximity_weight")):
            param_grads[f"block{l}_{short}"] = grads[name]
        param_grads[f"head{l}"] = grads["head_kernel"]
    grad_features[1] = g_h if g_h is not None else np.zeros_like(trace.features[1])
    grad_predictions = {1: g_o}
    for l in range(2, n + 1):
        grad_predictions[l] = np.zeros_like(trace.predictions[l], dtype=np.float64)
    return param_grads, grad_features, grad_predictions


def _expected_shapes(n_scales: int, channels: int) -> dict:
    m = channels
    shapes = {"conv1_w": (m, 3, 3, 3), "conv1_b": (m,)}
    for s in range(2, n_scales + 1):
        shapes[f"conv{s}_w"] = (m, m, 3, 3)
        shapes[f"conv{s}_b"] = (m,)
    for l in range(1, n_scales + 1):
        shapes[f"head{l}"] = (m,)
    for l in range(2, n_scales + 1):
        shapes[f"block{l}_ff"] = (m, m, 3, 3)
        shapes[f"block{l}_fs"] = (m, m, 3, 3)
        shapes[f"block{l}_scale"] = (m,)
        shapes[f"block{l}_sim"] = ()
        shapes[f"block{l}_prox"] = ()
    return shapes


def save_checkpoint(model: CascadeModel, path) -> None:
    """One tensor file per parameter plus a manifest; float32 payloads
    make the round trip bit-exact."""
    os.makedirs(path, exist_ok=True)
    lines = [
        f"format: {CHECKPOINT_FORMAT}",
        f"scales: {model.n_scales}",
        f"channels: {model.channels}",
    ]
    for l in range(2, model.n_scales + 1):
        s = model.config.scale(l)
        msgs = ",".join(sorted(s.messages)) if s.messages else "none"
        lines.append(
            f"scale{l}: space={s.space_sigma!r} color={s.color_sigma!r} "
            f"prox={s.prox_sigma!r} iters={s.mf_iters} messages={msgs}"
        )
    lines.append("tensors: " + " ".join(sorted(model.params)))
    with open(os.path.join(path, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for key, arr in model.params.items():
        a = np.asarray(arr)
        if a.ndim == 0:
            # the container stores rank >= 1; shape is restored on load
            a = a.reshape(1)
        write_tensor(os.path.join(path, key + ".ucrf"), a)


def _parse_manifest(path) -> dict:
    fields: dict = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    return fields


def load_checkpoint(path) -> CascadeModel:
    manifest = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ValueError(f"{manifest} not found; not a checkpoint directory")
    fields = _parse_manifest(manifest)
    try:
        version = int(fields["format"])
        n_scales = int(fields["scales"])
        channels = int(fields["channels"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"manifest header incomplete or malformed: {exc}")
    if version != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {version}")
    if n_scales < 2:
        raise ValueError(f"manifest declares {n_scales} scales, need at least 2")

    settings = {}
    for l in range(2, n_scales + 1):
        if f"scale{l}" not in fields:
            raise ValueError(f"manifest has no settings for scale {l}")
        kv = dict(item.split("=", 1) for item in fields[f"scale{l}"].split())
        msgs = frozenset() if kv["messages"] == "none" else frozenset(kv["messages"].split(","))
        settings[l] = ScaleSettings(
            space_sigma=float(kv["space"]),
            color_sigma=float(kv["color"]),
            prox_sigma=float(kv["prox"]),
            mf_iters=int(kv["iters"]),
            messages=msgs,
        )
    config = ScaleConfig(settings=settings)
    config.validate()

    keys = fields.get("tensors", "").split()
    shapes = _expected_shapes(n_scales, channels)
    for key in keys:
        if key.startswith("block"):
            scale = int(key[5:].partition("_")[0])
            if not 2 <= scale <= n_scales:
                raise ValueError(
                    f"manifest declares {n_scales} scales but lists tensor {key}"
                )
    missing = [k for k in shapes if k not in keys]
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {' '.join(missing)}")

    params: dict = {}
    for key in keys:
        fpath = os.path.join(path, key + ".ucrf")
        if not os.path.exists(fpath):
            raise ValueError(f"manifest lists {key} but {fpath} is missing")
        arr = read_tensor(fpath)
        want = shapes.get(key)
        if want == ():
            arr = arr.reshape(())
        if want is not None and arr.shape != want:
            raise ValueError(f"tensor {key} has shape {arr.shape}, expected {want}")
        params[key] = arr
    return CascadeModel(n_scales=n_scales, channels=channels, params=params, config=config)
