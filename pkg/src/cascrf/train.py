"""Two-stage training: per-scale supervision, then joint refinement.

Stage 1 fits the encoder and its side heads alone.  Stage 2 runs the
full cascade and backpropagates the final-map loss through blocks and
encoder jointly.  One iteration consumes one sample; gradients are
averaged over ``iter_size`` samples per optimizer step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .backbone import backbone_backward, backbone_forward
from .cascade import (
    CascadeModel,
    build_cascade_operators,
    cascade_backward,
    cascade_forward,
    init_cascade_model,
    save_checkpoint,
)
from .core import sigmoid
from .data import augment_hflip, load_pair

LOG_HEADER = "iter,stage,loss,lr"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    Defaults record the source training recipe (tuned for a large
    pretrained net on real data); they are far too cold for the toy
    encoder, so practical runs use the presets below.
    """

    stage: int = 1
    learning_rate: float = 1e-9
    beta_lr: float = 1e-8          # stage-2 rate for the smoothing weights
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iter_size: int = 10
    max_iter: int = 14000
    seed: int = 0
    plateau_patience: int = 0      # 0 disables loss-plateau lr decay
    lr_decay: float = 0.9
    beta_clip: float = 0.0         # 0 disables smoothing-weight gradient clipping

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.iter_size < 1:
            raise ValueError("iter_size must be at least 1")
        if min(self.learning_rate, self.beta_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def toy_stage1_config(seed: int = 0, **overrides) -> TrainConfig:
    # per-sample updates, not accumulated ones: the toy encoder trains
    # from scratch, so 2000 iterations must mean 2000 steps
    cfg = TrainConfig(
        stage=1, learning_rate=1e-2, iter_size=1, max_iter=2000, seed=seed
    )
    return replace(cfg, **overrides) if overrides else cfg


def toy_stage2_config(n_train: int, epochs: int = 10, seed: int = 0, **overrides) -> TrainConfig:
    cfg = TrainConfig(
        stage=2,
        learning_rate=3e-4,
        beta_lr=1e-3,
        iter_size=1,
        max_iter=epochs * n_train,
        seed=seed,
        beta_clip=10.0,
    )
    return replace(cfg, **overrides) if overrides else cfg


def sigmoid_xent(logits: np.ndarray, mask: np.ndarray):
    """Mean per-pixel sigmoid cross-entropy and its gradient.

    The per-pixel gradient before the 1/N normalization is the classic
    sigmoid(x) - g.
    """
    if logits.shape != mask.shape:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} differ")
    x = np.asarray(logits, dtype=np.float64)
    g = np.asarray(mask, dtype=np.float64)
    # stable softplus form of -g*log(s) - (1-g)*log(1-s)
    per_pixel = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    grad = (sigmoid(x) - g) / n
    return float(per_pixel.sum() / n), grad


def stage1_loss(sides: dict, mask: np.ndarray):
    """Sum of mean cross-entropies over all scales; all scales weighted
    equally."""
    total = 0.0
    grads = {}
    for l in sorted(sides):
        loss, grad = sigmoid_xent(sides[l], mask)
        total += loss
        grads[l] = grad
    return total, grads


def stage2_loss(o_final: np.ndarray, mask: np.ndarray):
    return sigmoid_xent(o_final, mask)


def init_velocity(params: dict) -> dict:
    return {k: np.zeros(np.shape(v), dtype=np.float64) for k, v in params.items()}


def is_smoothing_weight(key: str) -> bool:
    return key.endswith("_sim") or key.endswith("_prox")


def sgd_step(params: dict, grads: dict, cfg: TrainConfig, velocity: dict) -> None:
    """Classical momentum with weight decay, in place.

    Smoothing weights get their own rate in stage 2 and are clamped to
    stay nonnegative (projected step).  Their raw gradients scale with
    the kernel row sums (hundreds of effective neighbors per pixel), so
    an optional clip caps them; rare spikes otherwise throw the weight
    into a heavy-blur regime that training cannot leave.
    """
    for key, g in grads.items():
        p = params[key]
        lr = cfg.learning_rate
        if cfg.stage == 2 and is_smoothing_weight(key):
            lr = cfg.beta_lr
            if cfg.beta_clip > 0:
                g = np.clip(g, -cfg.beta_clip, cfg.beta_clip)
        v = velocity[key]
        v *= cfg.momentum
        v -= lr * (g + cfg.weight_decay * np.asarray(p, dtype=np.float64))
        p += v
        if is_smoothing_weight(key):
            np.maximum(p, 0.0, out=p)


class FlippedPairwise:
    """View of a pairwise operator under horizontal mirroring.

    Flipping an image permutes pixels, and a kernel built from the
    flipped image is the original kernel conjugated by that permutation,
    so the expensive structure is built once per unflipped image.
    """

    def __init__(self, op, height: int, width: int):
        self._op = op
        self._hw = (height, width)
        self.n_points = op.n_points

    def _flip(self, v: np.ndarray) -> np.ndarray:
        shape = v.shape
        return np.ascontiguousarray(v.reshape(self._hw)[:, ::-1]).reshape(shape)

    def pairwise_apply(self, v: np.ndarray) -> np.ndarray:
        return self._flip(self._op.pairwise_apply(self._flip(v)))

    def gaussian_filter(self, v: np.ndarray) -> np.ndarray:
        return self._flip(self._op.gaussian_filter(self._flip(v)))

    def row_sums(self) -> np.ndarray:
        return self._flip(self._op.row_sums())


def flip_operator_table(ops: dict, height: int, width: int) -> dict:
    flipped = {}
    seen: dict = {}
    for l, pair in ops.items():
        key = id(pair)
        if key not in seen:
            seen[key] = tuple(FlippedPairwise(op, height, width) for op in pair)
        flipped[l] = seen[key]
    return flipped


def merge_grads(*grad_dicts) -> dict:
    total: dict = {}
    for grads in grad_dicts:
        for k, g in grads.items():
            if k in total:
                total[k] = total[k] + g
            else:
                total[k] = g
    return total


class TrainLog:
    """CSV rows (iter, stage, loss, lr); bytes are reproducible because
    every field is formatted with repr."""

    def __init__(self):
        self.rows = [LOG_HEADER]
        self.losses: list[float] = []

    def add(self, iteration: int, stage: int, loss: float, lr: float) -> None:
        self.rows.append(f"{iteration},{stage},{loss!r},{lr!r}")
        self.losses.append(loss)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.rows) + "\n")


class _PlateauDecay:
    """Optional lr decay when the smoothed loss stops improving.

    Disabled at patience 0; each decay scales both rates and resets the
    stall counter.
    """

    def __init__(self, cfg: TrainConfig):
        self.best = np.inf
        self.stalled = 0
        self.patience = cfg.plateau_patience

    def update(self, cfg: TrainConfig, losses) -> TrainConfig:
        if self.patience <= 0:
            return cfg
        window = np.asarray(losses[-20:], dtype=np.float64)
        current = float(window.mean())
        if current < self.best - 1e-12:
            self.best = current
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                cfg = replace(
                    cfg,
                    learning_rate=cfg.learning_rate * cfg.lr_decay,
                    beta_lr=cfg.beta_lr * cfg.lr_decay,
                )
                self.stalled = 0
        return cfg


def smoothed_loss(losses, window: int = 20) -> np.ndarray:
    """Trailing-window mean at each iteration (shorter head windows)."""
    arr = np.asarray(losses, dtype=np.float64)
    out = np.empty_like(arr)
    csum = np.concatenate([[0.0], np.cumsum(arr)])
    for i in range(len(arr)):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def _load_all(pairs):
    images, masks = [], []
    for img_path, gt_path in pairs:
        img, mask = load_pair(img_path, gt_path)
        images.append(np.asarray(img, dtype=np.float64))
        masks.append(np.asarray(mask, dtype=np.float64))
    return images, masks


def _sample_order(rng, n: int, total: int) -> np.ndarray:
    """Epoch-shuffled sample indices covering ``total`` iterations."""
    reps = -(-total // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:total]


def train_stage1(model: CascadeModel, pairs, cfg: TrainConfig, log: TrainLog | None = None) -> TrainLog:
    """Per-scale supervision of the encoder; blocks are untouched."""
    cfg.validate()
    if cfg.stage != 1:
        raise ValueError("config is not a stage-1 config")
    log = log if log is not None else TrainLog()
    images, masks = _load_all(pairs)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    order = _sample_order(rng, len(images), cfg.max_iter)
    flips = rng.random(cfg.max_iter) < 0.5
    velocity = init_velocity(model.params)
    plateau = _PlateauDecay(cfg)
    acc: dict = {}
    for it in range(cfg.max_iter):
        img, mask = images[order[it]], masks[order[it]]
        if flips[it]:
            img, mask = augment_hflip(img, mask)
        trace = backbone_forward(img, model.params)
        loss, grad_sides = stage1_loss(trace.sides, mask)
        grads = backbone_backward(trace, model.params, grad_sides=grad_sides)
        acc = merge_grads(acc, grads)
        log.add(it + 1, 1, loss, cfg.learning_rate)
        if (it + 1) % cfg.iter_size == 0:
            step_grads = {k: g / cfg.iter_size for k, g in acc.items()}
            sgd_step(model.params, step_grads, cfg, velocity)
            acc = {}
            cfg = plateau.update(cfg, log.losses)
    return log


def train_stage2(
    model: CascadeModel,
    pairs,
    cfg: TrainConfig,
    messages: frozenset | None = None,
    log: TrainLog | None = None,
    ops_cache: dict | None = None,
) -> TrainLog:
    """Joint refinement training on the final fused map.

    ``messages`` overrides every block's message set (the ablation
    switch); None keeps the per-scale configuration.  Pairwise operator
    structures are built once per training image and reused across
    epochs; flipped samples reuse them through a mirror view.  Pass a
    shared ``ops_cache`` (sample index -> operator table) to reuse the
    structures across runs on the same dataset; the operators depend
    only on the image and the kernel bandwidths, never on parameters.
    """
    cfg.validate()
    if cfg.stage != 2:
        raise ValueError("config is not a stage-2 config")
    log = log if log is not None else TrainLog()
    images, masks = _load_all(pairs)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 22]))
    order = _sample_order(rng, len(images), cfg.max_iter)
    flips = rng.random(cfg.max_iter) < 0.5
    velocity = init_velocity(model.params)
    plateau = _PlateauDecay(cfg)
    acc: dict = {}

    needs_ops = any(
        "ss" in (messages if messages is not None else model.block_messages(l))
        for l in range(2, model.n_scales + 1)
    )
    if ops_cache is None:
        ops_cache = {}
    flipped_cache: dict = {}

    for it in range(cfg.max_iter):
        idx = int(order[it])
        img, mask = images[idx], masks[idx]
        ops = None
        if needs_ops:
            if idx not in ops_cache:
                ops_cache[idx] = build_cascade_operators(img, model)
            ops = ops_cache[idx]
        if flips[it]:
            img, mask = augment_hflip(img, mask)
            if ops is not None:
                if idx not in flipped_cache:
                    flipped_cache[idx] = flip_operator_table(
                        ops, img.shape[0], img.shape[1]
                    )
                ops = flipped_cache[idx]

        bt = backbone_forward(img, model.params)
        trace = cascade_forward(
            bt.feats, bt.sides, img, model, ops=ops, messages_override=messages
        )
        loss, grad_final = stage2_loss(trace.o[model.n_scales], mask)
        block_grads, grad_feats, grad_preds = cascade_backward(trace, grad_final, model)
        backbone_grads = backbone_backward(
            bt, model.params, grad_feats=grad_feats, grad_sides={1: grad_preds[1]}
        )
        acc = merge_grads(acc, block_grads, backbone_grads)
        log.add(it + 1, 2, loss, cfg.learning_rate)
        if (it + 1) % cfg.iter_size == 0:
            step_grads = {k: g / cfg.iter_size for k, g in acc.items()}
            sgd_step(model.params, step_grads, cfg, velocity)
            acc = {}
            cfg = plateau.update(cfg, log.losses)
    return log


def predict_logits(model: CascadeModel, img: np.ndarray, messages: frozenset | None = None,
                   ops: dict | None = None) -> np.ndarray:
    """Final-scale fused logit map for one image."""
    bt = backbone_forward(np.asarray(img, dtype=np.float64), model.params)
    trace = cascade_forward(bt.feats, bt.sides, img, model, ops=ops,
                            messages_override=messages)
    return trace.o[model.n_scales]


# message-set grid mirroring the ablation table: no messages, each
# family alone, then everything
MESSAGE_GRID = (
    ("baseline", frozenset()),
    ("ff", frozenset({"ff"})),
    ("ss", frozenset({"ss"})),
    ("full", frozenset({"ff", "fs", "ss"})),
)


def run_message_grid(
    train_pairs,
    test_pairs,
    out_dir,
    channels: int = 16,
    seed: int = 0,
    stage1_iters: int = 2000,
    epochs: int = 10,
    grid=MESSAGE_GRID,
) -> dict:
    """Train stage 1 once, then stage 2 under each message set.

    Every configuration restarts from the same stage-1 checkpoint with
    the same seed, so the only difference between rows is which
    messages exist.  Writes per-config checkpoints, training logs, and
    evaluation CSVs under ``out_dir``; returns name -> result dict.
    """
    from .metrics import format_eval_csv

    os.makedirs(out_dir, exist_ok=True)
    base = init_cascade_model(channels=channels, seed=seed)
    s1_log = train_stage1(
        base, train_pairs, toy_stage1_config(seed=seed, max_iter=stage1_iters)
    )
    save_checkpoint(base, os.path.join(out_dir, "stage1"))
    s1_log.write(os.path.join(out_dir, "stage1_log.csv"))

    test_names = [os.path.basename(p) for p, _ in test_pairs]
    train_ops: dict = {}
    eval_ops: dict = {}
    results: dict = {}
    for name, messages in grid:
        model = CascadeModel(
            n_scales=base.n_scales,
            channels=base.channels,
            params={k: v.copy() for k, v in base.params.items()},
            config=base.config,
        )
        cfg = toy_stage2_config(len(train_pairs), epochs=epochs, seed=seed)
        log = train_stage2(model, train_pairs, cfg, messages=messages, ops_cache=train_ops)
        save_checkpoint(model, os.path.join(out_dir, f"stage2_{name}"))
        log.write(os.path.join(out_dir, f"stage2_{name}_log.csv"))
        metrics = evaluate_model(model, test_pairs, messages=messages, ops_cache=eval_ops)
        with open(os.path.join(out_dir, f"eval_{name}.csv"), "w") as fh:
            fh.write(format_eval_csv(test_names, metrics))
        results[name] = {"messages": messages, "metrics": metrics, "log": log}
    return results


def evaluate_model(
    model: CascadeModel,
    pairs,
    messages: frozenset | None = None,
    ops_cache: dict | None = None,
) -> dict:
    """Dataset metrics of the final fused map over (image, mask) pairs."""
    from .core import saliency_to_uint8
    from .metrics import dataset_metrics

    if ops_cache is None:
        ops_cache = {}
    needs_ops = any(
        "ss" in (messages if messages is not None else model.block_messages(l))
        for l in range(2, model.n_scales + 1)
    )
    sals, gts = [], []
    for idx, (img_path, gt_path) in enumerate(pairs):
        img, mask = load_pair(img_path, gt_path)
        img = np.asarray(img, dtype=np.float64)
        ops = None
        if needs_ops:
            if idx not in ops_cache:
                ops_cache[idx] = build_cascade_operators(img, model)
            ops = ops_cache[idx]
        logits = predict_logits(model, img, messages=messages, ops=ops)
        sals.append(saliency_to_uint8(logits))
        gts.append(np.asarray(mask, dtype=np.float64))
    return dataset_metrics(sals, gts)
