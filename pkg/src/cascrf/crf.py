"""One refinement block: joint feature estimation and prediction mean-field.

A block sits at a scale of the cascade and consumes three things: the
backbone features ``f_l`` at its own resolution, the estimated features
``h_prev`` from the previous (coarser) scale, and the previous scale's
refined prediction ``o_prev`` at full resolution.  The forward pass

    1. estimates features: f_l plus per-channel-scaled, upsampled
       convolution messages from h_prev (feature-feature) and from the
       replicated, downsampled o_prev (feature-prediction),
    2. projects them to a logit map with a 1x1 head, upsampled to full
       resolution,
    3. fuses the previous prediction in by addition (logit space),
    4. runs T damped-Jacobi mean-field iterations that smooth the fused
       map under bilateral and proximity Gaussian kernels
       (prediction-prediction messages).

The iteration is mu <- (s_obs + 2*b1*P1(mu) + 2*b2*P2(mu)) / rho with
rho = 1 + 2*(b1*rowsum1 + b2*rowsum2), which is Jacobi on the strictly
diagonally dominant system (diag(rho) - 2*b1*K1 - 2*b2*K2) mu = s_obs,
so it converges geometrically for any nonnegative weights.

Message types can be disabled individually ("ff", "fs", "ss"); with
everything off the block degenerates to head(f_l) + o_prev exactly.

The backward pass is the exact adjoint of the unrolled forward.  The
Gaussian operators are symmetric, so their adjoint is the same
filtering applied to the incoming gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import bilinear_resize, bilinear_resize_adjoint
from .convops import conv2d, conv2d_backward
from .gridops import WindowedBilateral, separable_grid_op
from .lattice import (
    BRUTE_FORCE_LIMIT,
    DENSE_CUTOFF,
    DenseGaussianPairwise,
    build_bilateral_features,
    build_pairwise,
    build_spatial_features,
)

ALL_MESSAGES = frozenset({"ff", "fs", "ss"})

# spatial bandwidths at or below this use exact windowed evaluation
WINDOWED_SIGMA_MAX = 2.5


@dataclass
class CrfBlockParams:
    """Learnable and structural parameters of one block.

    Arrays are referenced, not copied, so a shared parameter registry
    can update them in place between steps.
    """

    ff_kernel: np.ndarray        # (M, M, k, k), feature <- feature messages
    fs_kernel: np.ndarray        # (M, M, k, k), feature <- prediction messages
    msg_scale: np.ndarray        # (M,), per-channel message weight (the 1/alpha scale)
    head_kernel: np.ndarray      # (M,), 1x1 projection to a logit map
    similarity_weight: np.ndarray  # scalar beta for the bilateral kernel
    proximity_weight: np.ndarray   # scalar beta for the spatial kernel
    space_sigma: float = 60.0
    color_sigma: float = 5.0
    prox_sigma: float = 3.0
    mf_iters: int = 3

    def validate(self) -> None:
        m = self.msg_scale.shape[0]
        if self.ff_kernel.shape[:2] != (m, m) or self.fs_kernel.shape[:2] != (m, m):
            raise ValueError("message kernels must map M channels to M channels")
        if self.head_kernel.shape != (m,):
            raise ValueError(f"head kernel must have shape ({m},)")
        if float(self.similarity_weight) < 0 or float(self.proximity_weight) < 0:
            raise ValueError("kernel weights must be nonnegative")
        if min(self.space_sigma, self.color_sigma, self.prox_sigma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.mf_iters < 1:
            raise ValueError("mean-field needs at least one iteration")


@dataclass
class CrfBlockOutput:
    h: np.ndarray                 # estimated features, scale-l resolution
    o: np.ndarray                 # refined prediction, full resolution logits
    s_obs: np.ndarray             # fused observation kept for backward
    mu_trace: list
    cache: dict = field(default_factory=dict, repr=False)


def estimate_features(
    f_l: np.ndarray,
    h_prev: np.ndarray,
    o_prev: np.ndarray,
    p: CrfBlockParams,
    messages: frozenset = ALL_MESSAGES,
    cache: dict | None = None,
) -> np.ndarray:
    m, hh, ww = f_l.shape
    if h_prev.shape[0] != m:
        raise ValueError(f"h_prev has {h_prev.shape[0]} channels, expected {m}")
    h = f_l.copy()
    scale = p.msg_scale.astype(f_l.dtype, copy=False)[:, None, None]
    if "ff" in messages:
        conv_ff = conv2d(h_prev, p.ff_kernel.astype(f_l.dtype, copy=False))
        up_ff = bilinear_resize(conv_ff, hh, ww)
        h += scale * up_ff
        if cache is not None:
            cache["up_ff"] = up_ff
    if "fs" in messages:
        ph, pw = h_prev.shape[1:]
        o_small = bilinear_resize(o_prev, ph, pw)
        rep = np.ascontiguousarray(np.broadcast_to(o_small, (m, ph, pw)))
        conv_fs = conv2d(rep, p.fs_kernel.astype(f_l.dtype, copy=False))
        up_fs = bilinear_resize(conv_fs, hh, ww)
        h += scale * up_fs
        if cache is not None:
            cache["rep"] = rep
            cache["up_fs"] = up_fs
    return h


def prediction_head(
    h: np.ndarray, p: CrfBlockParams, out_shape: tuple[int, int] | None = None
) -> np.ndarray:
    if h.shape[0] != p.head_kernel.shape[0]:
        raise ValueError(f"features have {h.shape[0]} channels, head expects {p.head_kernel.shape[0]}")
    s = np.tensordot(p.head_kernel.astype(h.dtype, copy=False), h, axes=(0, 0))
    if out_shape is None:
        return s
    return bilinear_resize(s, out_shape[0], out_shape[1])


def fuse_observation(s_head: np.ndarray, o_prev: np.ndarray) -> np.ndarray:
    if s_head.shape != o_prev.shape:
        raise ValueError(f"cannot fuse shapes {s_head.shape} and {o_prev.shape}")
    return s_head + o_prev


def compute_rho(op1, op2, p: CrfBlockParams, shape: tuple[int, ...]) -> np.ndarray:
    """Mean-field normalizer: 1 + 2*(b1*rowsums1 + b2*rowsums2).

    Zero-weight kernels contribute nothing and their operator is never
    touched, so the weight-free case is exactly ones.
    """
    rho = np.ones(shape)
    n = int(np.prod(shape))
    b1 = float(p.similarity_weight)
    b2 = float(p.proximity_weight)
    for b, op in ((b1, op1), (b2, op2)):
        if b != 0.0:
            if op.n_points != n:
                raise ValueError(f"operator covers {op.n_points} points, map has {n}")
            rho += 2.0 * b * op.row_sums().reshape(shape)
    return rho


def meanfield_iterate(s_obs: np.ndarray, op1, op2, p: CrfBlockParams, cache: dict | None = None):
    """Run T damped-Jacobi iterations from mu = s_obs; returns (mu_T, trace)."""
    dtype = s_obs.dtype
    rho = compute_rho(op1, op2, p, s_obs.shape).astype(dtype, copy=False)
    b1 = float(p.similarity_weight)
    b2 = float(p.proximity_weight)
    mu = s_obs
    trace = [mu]
    pair1_trace = []
    pair2_trace = []
    for _ in range(p.mf_iters):
        acc = s_obs.copy()
        if b1 != 0.0:
            pair1 = op1.pairwise_apply(mu).astype(dtype, copy=False)
            acc += 2.0 * b1 * pair1
            pair1_trace.append(pair1)
        if b2 != 0.0:
            pair2 = op2.pairwise_apply(mu).astype(dtype, copy=False)
            acc += 2.0 * b2 * pair2
            pair2_trace.append(pair2)
        mu = acc / rho
        trace.append(mu)
    if cache is not None:
        cache["rho"] = rho
        cache["pair1_trace"] = pair1_trace
        cache["pair2_trace"] = pair2_trace
    return mu, trace


def fixed_point_oracle(s_obs: np.ndarray, emb1: np.ndarray, emb2: np.ndarray, p: CrfBlockParams) -> np.ndarray:
    """Direct dense solve of the mean-field fixed point (test oracle)."""
    n = s_obs.size
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"dense solve capped at {BRUTE_FORCE_LIMIT} points, got {n}")
    b1 = float(p.similarity_weight)
    b2 = float(p.proximity_weight)
    a = np.eye(n)
    for b, emb in ((b1, emb1), (b2, emb2)):
        if b != 0.0:
            op = DenseGaussianPairwise(emb)
            if op.n_points != n:
                raise ValueError(f"embeddings cover {op.n_points} points, map has {n}")
            k = op.kernel
            a += 2.0 * b * (np.diag(k.sum(axis=1)) - k)
    mu = np.linalg.solve(a, s_obs.reshape(-1).astype(np.float64))
    return mu.reshape(s_obs.shape).astype(s_obs.dtype, copy=False)


def build_block_operators(img: np.ndarray, p: CrfBlockParams, **lattice_kwargs):
    """Per-image Gaussian operators for one block's bandwidth set.

    Color bandwidths follow the 8-bit convention (a sigma of 5 means 5
    intensity levels), while images arrive in [0, 1], so colors are put
    back on the 0..255 scale here.  The spatial kernel always uses the
    exact separable grid operator.  The bilateral kernel goes dense
    when the image is tiny, windowed when its spatial bandwidth is
    small, and through the lattice otherwise; ``lattice_kwargs`` tune
    only that last path.
    """
    h, w = img.shape[:2]
    img8 = np.asarray(img, dtype=np.float64) * 255.0
    if h * w <= DENSE_CUTOFF:
        op1 = DenseGaussianPairwise(
            build_bilateral_features(img8, p.space_sigma, p.color_sigma)
        )
    elif p.space_sigma <= WINDOWED_SIGMA_MAX:
        op1 = WindowedBilateral(img8, p.space_sigma, p.color_sigma)
    else:
        op1 = build_pairwise(
            build_bilateral_features(img8, p.space_sigma, p.color_sigma),
            **lattice_kwargs,
        )
    op2 = separable_grid_op(h, w, p.prox_sigma)
    return op1, op2


def crf_block_forward(
    f_l: np.ndarray,
    h_prev: np.ndarray,
    o_prev: np.ndarray,
    p: CrfBlockParams,
    ops=None,
    img: np.ndarray | None = None,
    messages: frozenset = ALL_MESSAGES,
) -> CrfBlockOutput:
    """Full block: features, head, fusion, then prediction mean-field.

    ``ops`` is the (bilateral, spatial) operator pair; pass ``img`` to
    have it built here.  With "ss" disabled (or both weights zero) no
    operators are needed and the observation passes through untouched.
    """
    cache: dict = {"messages": messages}
    h = estimate_features(f_l, h_prev, o_prev, p, messages, cache)
    s_head = prediction_head(h, p, out_shape=o_prev.shape)
    s_obs = fuse_observation(s_head, o_prev)
    smooth = "ss" in messages and (
        float(p.similarity_weight) != 0.0 or float(p.proximity_weight) != 0.0
    )
    if smooth:
        if ops is None:
            if img is None:
                raise ValueError("prediction smoothing needs operators or an image")
            ops = build_block_operators(img, p)
        mu, trace = meanfield_iterate(s_obs, ops[0], ops[1], p, cache)
    else:
        mu, trace = s_obs, [s_obs]
    cache["h"] = h
    cache["ops"] = ops
    cache["smooth"] = smooth
    return CrfBlockOutput(h=h, o=mu, s_obs=s_obs, mu_trace=trace, cache=cache)


PARAM_NAMES = (
    "ff_kernel",
    "fs_kernel",
    "msg_scale",
    "head_kernel",
    "similarity_weight",
    "proximity_weight",
)


def zero_param_grads(p: CrfBlockParams) -> dict[str, np.ndarray]:
    # gradients accumulate in double precision whatever the parameter dtype
    return {
        name: np.zeros(np.shape(getattr(p, name)), dtype=np.float64)
        for name in PARAM_NAMES
    }


def crf_block_backward(
    out: CrfBlockOutput,
    grad_o: np.ndarray,
    grad_h: np.ndarray | None,
    inputs: tuple[np.ndarray, np.ndarray, np.ndarray],
    p: CrfBlockParams,
):
    """Exact reverse pass; returns (grad_f_l, grad_h_prev, grad_o_prev, grad_params)."""
    f_l, h_prev, o_prev = inputs
    cache = out.cache
    if "h" not in cache:
        raise ValueError("forward cache missing; rerun crf_block_forward")
    messages = cache["messages"]
    grads = zero_param_grads(p)
    dtype = out.o.dtype

    g_mu = np.asarray(grad_o, dtype=dtype)
    g_s_obs = np.zeros_like(out.s_obs)
    if cache["smooth"]:
        rho = cache["rho"]
        op1, op2 = cache["ops"]
        b1 = float(p.similarity_weight)
        b2 = float(p.proximity_weight)
        g_rho = np.zeros_like(rho)
        for t in range(p.mf_iters, 0, -1):
            mu_t = out.mu_trace[t]
            g_acc = g_mu / rho
            g_rho -= g_mu * mu_t / rho
            g_s_obs += g_acc
            g_next = np.zeros_like(g_acc)
            for name, b, op, pair_trace in (
                ("similarity_weight", b1, op1, cache["pair1_trace"]),
                ("proximity_weight", b2, op2, cache["pair2_trace"]),
            ):
                if b != 0.0:
                    pair = pair_trace[t - 1]
                    g_next += 2.0 * b * op.pairwise_apply(g_acc).astype(dtype, copy=False)
                else:
                    # forward skipped this kernel; a weight clamped to zero
                    # still gets its true partial so descent can revive it
                    pair = op.pairwise_apply(out.mu_trace[t - 1]).astype(dtype, copy=False)
                grads[name] += 2.0 * (g_acc * pair).sum()
            g_mu = g_next
        g_s_obs += g_mu
        # rho = 1 + 2*(b1*rowsums1 + b2*rowsums2)
        grads["similarity_weight"] += 2.0 * (
            g_rho * op1.row_sums().reshape(rho.shape)
        ).sum()
        grads["proximity_weight"] += 2.0 * (
            g_rho * op2.row_sums().reshape(rho.shape)
        ).sum()
    else:
        g_s_obs += g_mu

    # fusion: s_obs = upsampled head + o_prev
    grad_o_prev = g_s_obs.copy()
    h = cache["h"]
    g_s_small = bilinear_resize_adjoint(g_s_obs, h.shape[1], h.shape[2])
    grads["head_kernel"] += np.tensordot(g_s_small, h, axes=([0, 1], [1, 2]))
    g_h = p.head_kernel.astype(dtype, copy=False)[:, None, None] * g_s_small[None]
    if grad_h is not None:
        g_h = g_h + np.asarray(grad_h, dtype=dtype)

    grad_f = g_h.copy()
    scale = p.msg_scale.astype(dtype, copy=False)[:, None, None]
    grad_h_prev = np.zeros_like(h_prev)
    if "ff" in messages:
        up_ff = cache["up_ff"]
        grads["msg_scale"] += (g_h * up_ff).sum(axis=(1, 2))
        g_conv = bilinear_resize_adjoint(g_h * scale, h_prev.shape[1], h_prev.shape[2])
        g_in, g_k = conv2d_backward(g_conv, h_prev, p.ff_kernel.astype(dtype, copy=False))
        grad_h_prev += g_in
        grads["ff_kernel"] += g_k
    if "fs" in messages:
        up_fs = cache["up_fs"]
        rep = cache["rep"]
        grads["msg_scale"] += (g_h * up_fs).sum(axis=(1, 2))
        g_conv = bilinear_resize_adjoint(g_h * scale, rep.shape[1], rep.shape[2])
        g_rep, g_k = conv2d_backward(g_conv, rep, p.fs_kernel.astype(dtype, copy=False))
        grads["fs_kernel"] += g_k
        g_small = g_rep.sum(axis=0)
        grad_o_prev += bilinear_resize_adjoint(g_small, o_prev.shape[0], o_prev.shape[1])
    return grad_f, grad_h_prev, grad_o_prev, grads
