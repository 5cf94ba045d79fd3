"""Synthetic salient-object data, flip augmentation, side-output import.

The generator is a stand-in for a real dataset: textured background,
one to three filled shapes whose colors sit well away from the
background mean, union mask as ground truth.  Everything is driven by
a single generator state so a seed pins the whole dataset.
"""

from __future__ import annotations

import os

import numpy as np

from .core import load_image, load_mask, read_tensor, save_image, save_mask

MIN_COLOR_OFFSET = 0.2
FG_FRACTION_RANGE = (0.05, 0.6)
SHAPE_AREA_RANGE = (0.10, 0.40)


def _shape_mask(kind: str, height: int, width: int, rng) -> np.ndarray:
    """Filled shape with area drawn from SHAPE_AREA_RANGE (pre-clipping)."""
    area = rng.uniform(*SHAPE_AREA_RANGE) * height * width
    cy = rng.uniform(0.2, 0.8) * height
    cx = rng.uniform(0.2, 0.8) * width
    ys, xs = np.mgrid[0:height, 0:width]
    if kind == "ellipse":
        aspect = rng.uniform(0.5, 2.0)
        rx = np.sqrt(area / (np.pi * aspect))
        ry = aspect * rx
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if kind == "rect":
        aspect = rng.uniform(0.5, 2.0)
        hx = np.sqrt(area / aspect) / 2.0
        hy = aspect * hx
        return (np.abs(ys - cy) <= hy) & (np.abs(xs - cx) <= hx)
    if kind == "triangle":
        v = rng.uniform(-1.0, 1.0, (3, 2))
        raw = 0.5 * abs(_cross2(v[1] - v[0], v[2] - v[0]))
        raw = max(raw, 1e-3)
        v = (v - v.mean(axis=0)) * np.sqrt(area / raw)
        v += [cy, cx]
        inside = np.ones((height, width), dtype=bool)
        for i in range(3):
            a, b = v[i], v[(i + 1) % 3]
            # consistent winding: points on the inner side of every edge
            side = (b[0] - a[0]) * (xs - a[1]) - (b[1] - a[1]) * (ys - a[0])
            inside &= side >= 0 if _winding(v) > 0 else side <= 0
        return inside
    raise ValueError(f"unknown shape kind {kind!r}")


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _winding(v: np.ndarray) -> float:
    return _cross2(v[1] - v[0], v[2] - v[0])


def _offset_color(bg_mean: np.ndarray, rng) -> np.ndarray:
    """Color at least MIN_COLOR_OFFSET from the background mean per the
    strongest channel, kept inside [0.05, 0.95] to survive noise + clip."""
    for _ in range(64):
        c = rng.uniform(0.05, 0.95, 3)
        if np.abs(c - bg_mean).max() >= MIN_COLOR_OFFSET:
            return c
    # push the worst channel outward as a last resort
    c = bg_mean.copy()
    k = int(np.argmin(np.abs(bg_mean - 0.5)))
    c[k] = bg_mean[k] + MIN_COLOR_OFFSET if bg_mean[k] <= 0.5 else bg_mean[k] - MIN_COLOR_OFFSET
    return np.clip(c, 0.0, 1.0)


def synth_sample(height: int, width: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; retries until the foreground fraction
    lands in FG_FRACTION_RANGE."""
    if height < 8 or width < 8:
        raise ValueError("image too small for the shape generator")
    kinds = ("ellipse", "rect", "triangle")
    ys, xs = np.mgrid[0:height, 0:width]
    for _ in range(64):
        bg = rng.uniform(0.15, 0.85, 3)
        # low-frequency wave plus pixel noise so the background has texture
        phase = rng.uniform(0, 2 * np.pi, 2)
        freq = rng.uniform(0.5, 2.0, 2)
        wave = 0.06 * np.sin(
            2 * np.pi * freq[0] * ys / height + phase[0]
        ) * np.cos(2 * np.pi * freq[1] * xs / width + phase[1])
        img = bg[None, None, :] + wave[:, :, None]
        img = img + rng.normal(0.0, 0.015, img.shape)
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            kind = kinds[rng.integers(0, 3)]
            shape = _shape_mask(kind, height, width, rng)
            color = _offset_color(bg, rng)
            img[shape] = color + rng.normal(0.0, 0.01, (int(shape.sum()), 3))
            mask |= shape
        frac = mask.mean()
        if FG_FRACTION_RANGE[0] <= frac <= FG_FRACTION_RANGE[1]:
            return np.clip(img, 0.0, 1.0), mask
    raise ValueError("could not satisfy foreground fraction constraints")


def synth_generate(out_dir, count: int, height: int = 48, width: int = 64,
                   seed: int = 0) -> None:
    """Write ``count`` samples as img/NNNN.png + gt/NNNN.png."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    img_dir = os.path.join(out_dir, "img")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    for i in range(count):
        img, mask = synth_sample(height, width, rng)
        save_image(os.path.join(img_dir, f"{i:04d}.png"), img)
        save_mask(os.path.join(gt_dir, f"{i:04d}.png"), mask)


def list_dataset(data_dir) -> list[tuple[str, str]]:
    """Sorted (image path, mask path) pairs for an img/ + gt/ layout."""
    img_dir = os.path.join(data_dir, "img")
    gt_dir = os.path.join(data_dir, "gt")
    if not os.path.isdir(img_dir) or not os.path.isdir(gt_dir):
        raise ValueError(f"{data_dir} does not contain img/ and gt/ directories")
    pairs = []
    for name in sorted(os.listdir(img_dir)):
        gt = os.path.join(gt_dir, name)
        if not os.path.exists(gt):
            raise ValueError(f"mask missing for {name}")
        pairs.append((os.path.join(img_dir, name), gt))
    if not pairs:
        raise ValueError(f"no samples under {data_dir}")
    return pairs


def load_pair(img_path, gt_path) -> tuple[np.ndarray, np.ndarray]:
    return load_image(img_path), load_mask(gt_path)


def augment_hflip(img: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror image and mask about the vertical axis; applying it twice
    returns the originals bit for bit."""
    return np.ascontiguousarray(img[:, ::-1]), np.ascontiguousarray(mask[:, ::-1])


def import_side_outputs(export_dir, image_path=None):
    """Load externally produced multi-scale features and side outputs.

    Expects f1..f5.ucrf (coarse to fine), s1..s5.ucrf full-resolution
    logit maps, and the source image (image.png inside the directory
    unless ``image_path`` points elsewhere).  Returns (features,
    predictions, image).
    """
    img_path = image_path if image_path else os.path.join(export_dir, "image.png")
    if not os.path.exists(img_path):
        raise ValueError(f"{img_path} is missing")
    img = load_image(img_path)
    full = img.shape[:2]

    features = {}
    predictions = {}
    for l in range(1, 6):
        for prefix, store in (("f", features), ("s", predictions)):
            path = os.path.join(export_dir, f"{prefix}{l}.ucrf")
            if not os.path.exists(path):
                raise ValueError(f"{prefix}{l}.ucrf is missing from {export_dir}")
            store[l] = np.asarray(read_tensor(path), dtype=np.float64)

    channels = features[1].shape[0] if features[1].ndim == 3 else -1
    for l in range(1, 6):
        f = features[l]
        if f.ndim != 3 or f.shape[0] != channels:
            raise ValueError(
                f"f{l}.ucrf must be ({channels}, h, w) to match the other scales, "
                f"got {f.shape}"
            )
        if l < 5:
            finer = features[l + 1]
            want = (-(-finer.shape[1] // 2), -(-finer.shape[2] // 2))
            if f.shape[1:] != want:
                raise ValueError(
                    f"f{l}.ucrf breaks the halving chain: expected spatial "
                    f"{want} from f{l + 1}, got {f.shape[1:]}"
                )
        s = predictions[l]
        if s.shape != full:
            raise ValueError(
                f"s{l}.ucrf must be full resolution {full}, got {s.shape}"
            )
    return features, predictions, img
