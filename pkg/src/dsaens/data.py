"""Synthetic desk-scale datasets, label noise, image corruption, augmentation.

Images are float32 arrays shaped (N, C, H, W) with values in [0, 1].
Keypoint coordinates are (x, y) pixels with the origin at the top-left corner,
x growing right and y growing down. Every generator and transform is a
deterministic function of its configuration and seed; per-item randomness is
derived from (seed, split, index) so generation order never matters.
"""

from __future__ import annotations

import colorsys
import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter1d

from .errors import ConfigurationError, InputError

SHAPE_NAMES = ("disc", "square", "triangle", "ring", "cross")

CORRUPTION_IDS = ("gaussian_noise", "impulse_noise", "motion_blur", "contrast")

# Severity ladders, index 0 = severity 1. Documented distortion measures:
# gaussian sigma (of dynamic range), replaced-pixel fraction, blur kernel
# width, and contrast retention factor.
GAUSSIAN_SIGMAS = (0.04, 0.06, 0.08, 0.09, 0.10)
IMPULSE_FRACTIONS = (0.03, 0.06, 0.09, 0.12, 0.15)
MOTION_BLUR_LENGTHS = (3, 5, 7, 9, 11)
CONTRAST_FACTORS = (0.75, 0.6, 0.45, 0.3, 0.2)


def _tag(name: str) -> int:
    """Stable 32-bit tag for seed derivation from a component name."""
    return zlib.crc32(name.encode("utf-8"))


def item_rng(seed: int, *parts) -> np.random.Generator:
    """Deterministic per-item random generator."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for part in parts:
        entropy.append(_tag(part) if isinstance(part, str) else int(part) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)


# ---------------------------------------------------------------------------
# Manifest and in-memory bundles
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    task: str
    image_size: int
    channels: int
    split_sizes: dict[str, int]
    num_classes: Optional[int] = None
    num_keypoints: Optional[int] = None
    norm_pair: Optional[tuple[int, int]] = None
    flip_pairs: tuple[tuple[int, int], ...] = ()
    heatmap_sigma: Optional[float] = None
    separability: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "keypoints"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        for split, size in self.split_sizes.items():
            if size <= 0:
                raise ConfigurationError(f"split {split!r} must have positive size, got {size}")
        if self.task == "classification":
            if not self.num_classes or self.num_classes < 2:
                raise ConfigurationError("classification needs num_classes >= 2")
        else:
            if not self.num_keypoints or self.num_keypoints < 2:
                raise ConfigurationError("keypoints task needs num_keypoints >= 2")
            if self.norm_pair is None:
                raise ConfigurationError("keypoints task needs a normalization pair")
            a, b = self.norm_pair
            k = self.num_keypoints
            if a == b or not (0 <= a < k) or not (0 <= b < k):
                raise ConfigurationError(f"invalid normalization pair {self.norm_pair}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        if raw.get("norm_pair") is not None:
            raw["norm_pair"] = tuple(raw["norm_pair"])
        raw["flip_pairs"] = tuple(tuple(p) for p in raw.get("flip_pairs", ()))
        return cls(**raw)


@dataclass
class DataBundle:
    """A dataset held in memory: images per split plus labels or coordinates."""

    manifest: DatasetManifest
    images: dict[str, np.ndarray]
    labels: Optional[dict[str, np.ndarray]] = None
    coords: Optional[dict[str, np.ndarray]] = None


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------


def _resize_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a (h, w, c) grid to (size, size, c)."""
    h, w = grid.shape[:2]
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    tl = grid[y0][:, x0]
    tr = grid[y0][:, x0 + 1]
    bl = grid[y0 + 1][:, x0]
    br = grid[y0 + 1][:, x0 + 1]
    return (tl * (1 - fx) * (1 - fy) + tr * fx * (1 - fy)
            + bl * (1 - fx) * fy + br * fx * fy)


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Anti-aliased filled mask of one of the shape primitives."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    if shape == "disc":
        sd = np.sqrt(dx ** 2 + dy ** 2) - radius
    elif shape == "square":
        sd = np.maximum(np.abs(dx), np.abs(dy)) - radius
    elif shape == "ring":
        sd = np.abs(np.sqrt(dx ** 2 + dy ** 2) - radius) - radius * 0.35
    elif shape == "cross":
        arm = radius * 0.38
        bar1 = np.maximum(np.abs(dx) - radius, np.abs(dy) - arm)
        bar2 = np.maximum(np.abs(dx) - arm, np.abs(dy) - radius)
        sd = np.minimum(bar1, bar2)
    elif shape == "triangle":
        # Equilateral triangle: interior where every outward half-plane
        # distance (edge normals at 30/150/270 degrees, inradius R/2) is <= 0.
        sd = None
        for angle in (30.0, 150.0, 270.0):
            rad = np.deg2rad(angle)
            nx_, ny_ = np.cos(rad), np.sin(rad)
            plane = (dx * nx_ + dy * ny_) - radius * 0.5
            sd = plane if sd is None else np.maximum(sd, plane)
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")
    return np.clip(0.5 - sd, 0.0, 1.0)


def _textured_background(rng: np.random.Generator, size: int, amplitude: float,
                         base_jitter: float = 0.15) -> np.ndarray:
    base = 0.5 + rng.uniform(-base_jitter, base_jitter)
    texture = rng.uniform(-1.0, 1.0, size=(4, 4, 3))
    bg = base + amplitude * _resize_bilinear(texture, size)
    return np.clip(bg, 0.0, 1.0)


def _hsv_color(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, float(np.clip(sat, 0, 1)),
                                        float(np.clip(val, 0, 1))))


# ---------------------------------------------------------------------------
# Synthetic classification data
# ---------------------------------------------------------------------------


def _render_class_image(rng, size, class_id, num_classes, separability):
    loose = 1.0 - separability
    bg = _textured_background(rng, size, amplitude=0.05 + 0.30 * loose,
                              base_jitter=0.15 * loose)
    hue = class_id / num_classes + rng.normal(0.0, 0.06 * loose)
    sat = 0.95 - 0.35 * loose * rng.uniform()
    val = 0.9 - 0.2 * loose * rng.uniform()
    color = _hsv_color(hue, sat, val)
    shape = SHAPE_NAMES[class_id % len(SHAPE_NAMES)]
    center = size / 2.0
    jitter = 7.0 * loose
    cx = center + rng.uniform(-jitter, jitter) if jitter else center
    cy = center + rng.uniform(-jitter, jitter) if jitter else center
    radius = size * (0.26 + rng.uniform(-0.08 * loose, 0.04 * loose))
    mask = _shape_mask(shape, size, cx, cy, radius)[..., None]
    img = bg * (1 - mask) + color[None, None, :] * mask
    if loose:
        img = img + rng.normal(0.0, 0.07 * loose, size=img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def synth_classification(
    num_classes: int = 10,
    image_size: int = 32,
    split_sizes: Optional[dict[str, int]] = None,
    separability: float = 0.7,
    seed: int = 0,
) -> DataBundle:
    """Colored geometric shapes on textured backgrounds, one look per class.

    ``separability`` in [0, 1] controls hue/position jitter and clutter; at
    1.0 the classes are trivially separable from raw pixels.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if image_size < 8:
        raise ConfigurationError("image_size must be >= 8")
    if not 0.0 <= separability <= 1.0:
        raise ConfigurationError("separability must be in [0, 1]")
    if split_sizes is None:
        split_sizes = {"train": 40, "unlabeled": 2000, "test": 500}
    split_sizes = {k: v for k, v in split_sizes.items() if v}

    manifest = DatasetManifest(
        task="classification",
        image_size=image_size,
        channels=3,
        split_sizes=dict(split_sizes),
        num_classes=num_classes,
        separability=separability,
        seed=seed,
    )
    images: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    for split, count in split_sizes.items():
        imgs = np.empty((count, 3, image_size, image_size), dtype=np.float32)
        labs = np.empty(count, dtype=np.int64)
        for i in range(count):
            rng = item_rng(seed, split, i)
            class_id = i % num_classes
            imgs[i] = _render_class_image(rng, image_size, class_id, num_classes, separability)
            labs[i] = class_id
        images[split] = imgs
        labels[split] = labs
    return DataBundle(manifest=manifest, images=images, labels=labels)


# ---------------------------------------------------------------------------
# Synthetic keypoint data
# ---------------------------------------------------------------------------


def _place_landmarks(rng, size, num_keypoints, margin=8.0, min_dist=6.0):
    for _ in range(50):
        center = size / 2.0 + rng.uniform(-0.08, 0.08, size=2) * size
        base = 2 * np.pi * np.arange(num_keypoints) / num_keypoints
        angles = base + rng.uniform(-0.25, 0.25, size=num_keypoints)
        radii = rng.uniform(0.18, 0.36, size=num_keypoints) * size
        xs = np.clip(center[0] + radii * np.cos(angles), margin, size - 1 - margin)
        ys = np.clip(center[1] + radii * np.sin(angles), margin, size - 1 - margin)
        pts = np.stack([xs, ys], axis=1)
        diffs = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(num_keypoints) * 1e9
        if dist.min() >= min_dist:
            return pts
    raise InputError("could not place landmarks with the requested spacing")


def synth_keypoints(
    num_keypoints: int = 3,
    image_size: int = 64,
    split_sizes: Optional[dict[str, int]] = None,
    heatmap_sigma: float = 2.0,
    seed: int = 0,
) -> DataBundle:
    """Images with K colored landmark discs at known coordinates.

    Keypoints 0 and 1 form the normalization pair used by PCK and are also
    the swap pair under horizontal flips.
    """
    if num_keypoints < 2:
        raise ConfigurationError("num_keypoints must be >= 2")
    if split_sizes is None:
        split_sizes = {"train": 30, "unlabeled": 70, "test": 30}
    split_sizes = {k: v for k, v in split_sizes.items() if v}

    manifest = DatasetManifest(
        task="keypoints",
        image_size=image_size,
        channels=3,
        split_sizes=dict(split_sizes),
        num_keypoints=num_keypoints,
        norm_pair=(0, 1),
        flip_pairs=((0, 1),),
        heatmap_sigma=heatmap_sigma,
        seed=seed,
    )
    images: dict[str, np.ndarray] = {}
    coords: dict[str, np.ndarray] = {}
    for split, count in split_sizes.items():
        imgs = np.empty((count, 3, image_size, image_size), dtype=np.float32)
        pts = np.empty((count, num_keypoints, 2), dtype=np.float32)
        for i in range(count):
            rng = item_rng(seed, split, i)
            img = _textured_background(rng, image_size, amplitude=0.15)
            landmarks = _place_landmarks(rng, image_size, num_keypoints)
            for k, (cx, cy) in enumerate(landmarks):
                color = _hsv_color(k / num_keypoints, 1.0, 1.0)
                mask = _shape_mask("disc", image_size, cx, cy, 2.5)[..., None]
                img = img * (1 - mask) + color[None, None, :] * mask
            img = np.clip(img + rng.normal(0, 0.02, size=img.shape), 0, 1)
            imgs[i] = img.transpose(2, 0, 1).astype(np.float32)
            pts[i] = landmarks
        images[split] = imgs
        coords[split] = pts
    return DataBundle(manifest=manifest, images=images, coords=coords)


def make_heatmaps(coords: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Gaussian target heatmaps with unit peak, shaped (N, K, size, size)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[-1] != 2:
        raise InputError("coords must be shaped (N, K, 2)")
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    n, k = coords.shape[:2]
    maps = np.empty((n, k, size, size), dtype=np.float32)
    for i in range(n):
        for j in range(k):
            cx, cy = coords[i, j]
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            maps[i, j] = np.exp(-d2 / (2.0 * sigma ** 2))
    return maps


# ---------------------------------------------------------------------------
# Label noise and image corruption
# ---------------------------------------------------------------------------


def inject_label_noise(labels: np.ndarray, rate: float, seed: int):
    """Flip exactly floor(rate * N) labels to uniformly drawn *other* classes.

    Returns (noisy_labels, flip_mask).
    """
    if not 0.0 <= rate < 1.0:
        raise InputError(f"noise rate must be in [0, 1), got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    noisy = labels.copy()
    mask = np.zeros(labels.shape[0], dtype=bool)
    n_flip = int(np.floor(rate * labels.shape[0]))
    if n_flip == 0:
        return noisy, mask
    if classes.size < 2:
        raise InputError("cannot inject label noise into a single-class dataset")
    rng = item_rng(seed, "label-noise")
    picked = rng.choice(labels.shape[0], size=n_flip, replace=False)
    for idx in picked:
        others = classes[classes != labels[idx]]
        noisy[idx] = rng.choice(others)
        mask[idx] = True
    return noisy, mask


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise InputError("images must be shaped (N, C, H, W)")
    return images


def corrupt_images(images: np.ndarray, corruption_id: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one corruption family at a severity in 1..5.

    The parameter ladders are monotone in the induced distortion; outputs are
    clipped back to [0, 1].
    """
    if corruption_id not in CORRUPTION_IDS:
        raise InputError(f"unknown corruption {corruption_id!r}; known: {CORRUPTION_IDS}")
    if severity not in (1, 2, 3, 4, 5):
        raise InputError(f"severity must be in 1..5, got {severity}")
    images = _check_images(images)
    level = severity - 1
    rng = item_rng(seed, "corrupt", corruption_id, severity)

    if corruption_id == "gaussian_noise":
        out = images + rng.normal(0.0, GAUSSIAN_SIGMAS[level], size=images.shape)
    elif corruption_id == "impulse_noise":
        n, c, h, w = images.shape
        out = images.copy()
        count = int(np.floor(IMPULSE_FRACTIONS[level] * h * w))
        for i in range(n):
            flat = rng.choice(h * w, size=count, replace=False)
            vals = rng.integers(0, 2, size=count).astype(np.float32)
            ys, xs = np.divmod(flat, w)
            out[i, :, ys, xs] = vals[:, None]
    elif corruption_id == "motion_blur":
        length = MOTION_BLUR_LENGTHS[level]
        out = uniform_filter1d(images, size=length, axis=-1, mode="nearest")
    else:  # contrast
        factor = CONTRAST_FACTORS[level]
        means = images.mean(axis=(1, 2, 3), keepdims=True)
        out = (images - means) * factor + means
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str
    rotation_deg: float
    scale_range: tuple[float, float]
    flip_prob: float
    crop_padding: int = 0
    intensity_ops: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigurationError(f"policy kind must be weak/strong, got {self.kind!r}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"bad scale range {self.scale_range}")


def weak_policy(task: str = "classification") -> AugmentationPolicy:
    return AugmentationPolicy(
        kind="weak",
        rotation_deg=5.0,
        scale_range=(0.95, 1.05),
        flip_prob=0.5,
        crop_padding=2 if task == "classification" else 0,
    )


def strong_policy(task: str = "classification") -> AugmentationPolicy:
    return AugmentationPolicy(
        kind="strong",
        rotation_deg=30.0,
        scale_range=(0.75, 1.25),
        flip_prob=0.5,
        crop_padding=2 if task == "classification" else 0,
        intensity_ops=("brightness", "contrast", "posterize") if task == "classification" else (),
    )


def validate_policy_pair(weak: AugmentationPolicy, strong: AugmentationPolicy) -> None:
    """The weak ranges must sit inside the strong ranges."""
    if weak.rotation_deg > strong.rotation_deg:
        raise ConfigurationError("weak rotation range exceeds strong")
    if weak.scale_range[0] < strong.scale_range[0] or weak.scale_range[1] > strong.scale_range[1]:
        raise ConfigurationError("weak scale range exceeds strong")
    if weak.crop_padding > strong.crop_padding:
        raise ConfigurationError("weak crop padding exceeds strong")


def _affine_about_center(size: int, angle_deg: float, scale: float,
                         flip: bool, dx: float, dy: float) -> np.ndarray:
    """Forward 3x3 matrix: flip, then rotate+scale about the center, then shift."""
    c = (size - 1) / 2.0
    mats = []
    if flip:
        mats.append(np.array([[-1, 0, size - 1], [0, 1, 0], [0, 0, 1]], dtype=np.float64))
    rad = np.deg2rad(angle_deg)
    cos, sin = np.cos(rad) * scale, np.sin(rad) * scale
    rot = np.array(
        [[cos, -sin, c - cos * c + sin * c],
         [sin, cos, c - sin * c - cos * c],
         [0, 0, 1]], dtype=np.float64)
    mats.append(rot)
    mats.append(np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1]], dtype=np.float64))
    out = np.eye(3)
    for m in mats:
        out = m @ out
    return out


def warp_affine(images: np.ndarray, inverse_mats: np.ndarray,
                fill: Optional[np.ndarray] = None) -> np.ndarray:
    """Bilinear warp of a batch; ``inverse_mats`` (B, 2, 3) map output pixels
    to input sampling locations. Out-of-bounds taps read ``fill`` (per image,
    per channel; defaults to the image mean)."""
    images = _check_images(images)
    b, c, h, w = images.shape
    if fill is None:
        fill = images.mean(axis=(2, 3))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)], axis=0)
    coords = np.einsum("bij,jk->bik", inverse_mats, grid)
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0).astype(np.float32)
    fy = (y - y0).astype(np.float32)
    flat = images.reshape(b, c, -1)

    def tap(ix, iy):
        valid = ((ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)).astype(np.float32)
        idx = np.clip(iy, 0, h - 1) * w + np.clip(ix, 0, w - 1)
        vals = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (b, c, h * w)), axis=2)
        return vals * valid[:, None, :], valid

    weights = [
        ((x0, y0), (1 - fx) * (1 - fy)),
        ((x0 + 1, y0), fx * (1 - fy)),
        ((x0, y0 + 1), (1 - fx) * fy),
        ((x0 + 1, y0 + 1), fx * fy),
    ]
    out = np.zeros((b, c, h * w), dtype=np.float32)
    coverage = np.zeros((b, h * w), dtype=np.float32)
    for (ix, iy), wgt in weights:
        vals, valid = tap(ix, iy)
        out += vals * wgt[:, None, :]
        coverage += valid * wgt
    out += fill[:, :, None] * (1.0 - coverage)[:, None, :]
    return out.reshape(b, c, h, w)


def _apply_intensity(img: np.ndarray, op: str, rng: np.random.Generator) -> np.ndarray:
    if op == "brightness":
        return img + rng.uniform(-0.25, 0.25)
    if op == "contrast":
        factor = rng.uniform(0.6, 1.4)
        mean = img.mean()
        return (img - mean) * factor + mean
    if op == "posterize":
        levels = int(rng.integers(4, 9))
        return np.round(img * (levels - 1)) / (levels - 1)
    raise ConfigurationError(f"unknown intensity op {op!r}")


def _is_identity(policy: AugmentationPolicy) -> bool:
    return (policy.rotation_deg == 0 and policy.scale_range == (1.0, 1.0)
            and policy.flip_prob == 0 and policy.crop_padding == 0
            and not policy.intensity_ops)


def draw_affine_batch(
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    batch: int,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample per-image forward matrices (B, 3, 3) and flip flags (B,)."""
    mats = np.empty((batch, 3, 3), dtype=np.float64)
    flips = np.zeros(batch, dtype=bool)
    for i in range(batch):
        flip = bool(rng.uniform() < policy.flip_prob)
        angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        scale = float(rng.uniform(*policy.scale_range))
        pad = policy.crop_padding
        dx = float(rng.integers(-pad, pad + 1)) if pad else 0.0
        dy = float(rng.integers(-pad, pad + 1)) if pad else 0.0
        mats[i] = _affine_about_center(size, angle, scale, flip, dx, dy)
        flips[i] = flip
    return mats, flips


def apply_affine_batch(images: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Warp a batch by forward matrices (sampling uses their inverses)."""
    inv = np.stack([np.linalg.inv(m)[:2] for m in mats])
    return warp_affine(images, inv)


def transform_coords(
    coords: np.ndarray,
    mats: np.ndarray,
    swap: Optional[np.ndarray] = None,
    flip_pairs: Sequence[tuple[int, int]] = (),
) -> np.ndarray:
    """Map (B, K, 2) coordinates through forward matrices; swap the paired
    landmark indices where ``swap`` is set (mirror-view label convention)."""
    coords = np.asarray(coords, dtype=np.float64)
    out = coords.copy()
    ones = np.ones((coords.shape[1], 1))
    for i in range(coords.shape[0]):
        pts = np.concatenate([coords[i], ones], axis=1)
        out[i] = (mats[i] @ pts.T).T[:, :2]
        if swap is not None and swap[i]:
            for a, b in flip_pairs:
                out[i, [a, b]] = out[i, [b, a]]
    return out.astype(np.float32)


def apply_intensity_batch(
    images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Apply 1-2 of the policy's intensity ops per image, then clip."""
    out = images
    for i in range(images.shape[0]):
        count = int(rng.integers(1, 3))
        chosen = rng.choice(len(policy.intensity_ops),
                            size=min(count, len(policy.intensity_ops)), replace=False)
        for idx in chosen:
            out[i] = _apply_intensity(out[i], policy.intensity_ops[int(idx)], rng)
    return np.clip(out, 0.0, 1.0)


def augment_batch(
    images: np.ndarray,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    coords: Optional[np.ndarray] = None,
    flip_pairs: Sequence[tuple[int, int]] = (),
    return_params: bool = False,
):
    """Geometric (and, for strong classification, intensity) augmentation.

    Keypoint coordinates are transformed by the same per-sample affine matrix;
    horizontal flips also swap the paired landmark indices. Returns the images,
    optionally followed by the transformed coordinates and the drawn
    (matrices, flips) parameters.
    """
    images = _check_images(images)
    if _is_identity(policy):
        result = [images.copy()]
        if coords is not None:
            result.append(np.asarray(coords, dtype=np.float32).copy())
        if return_params:
            eye = np.broadcast_to(np.eye(3), (images.shape[0], 3, 3)).copy()
            result.append((eye, np.zeros(images.shape[0], dtype=bool)))
        return tuple(result) if len(result) > 1 else result[0]

    b, _, h, _ = images.shape
    mats, flips = draw_affine_batch(policy, rng, b, h)
    out = apply_affine_batch(images, mats)
    if policy.intensity_ops:
        out = apply_intensity_batch(out, policy, rng)

    result = [out]
    if coords is not None:
        result.append(transform_coords(coords, mats, swap=flips, flip_pairs=flip_pairs))
    if return_params:
        result.append((mats, flips))
    return tuple(result) if len(result) > 1 else result[0]


def augment_sample(
    image: np.ndarray,
    policy: AugmentationPolicy,
    seed: int,
    coords: Optional[np.ndarray] = None,
    flip_pairs: Sequence[tuple[int, int]] = (),
):
    """Single-sample convenience wrapper around :func:`augment_batch`."""
    rng = item_rng(seed, "augment-sample")
    imgs = np.asarray(image, dtype=np.float32)[None]
    if coords is not None:
        out, pts = augment_batch(imgs, policy, rng, coords=np.asarray(coords)[None],
                                 flip_pairs=flip_pairs)
        return out[0], pts[0]
    return augment_batch(imgs, policy, rng)[0]


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------


def save_dataset(bundle: DataBundle, root: Union[str, Path]) -> None:
    """Write manifest.json, images/<split>_<idx>.png and labels.csv."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(bundle.manifest.to_json())
    rows = []
    for split in bundle.manifest.split_sizes:
        imgs = bundle.images[split]
        for i in range(imgs.shape[0]):
            name = f"{split}_{i:05d}"
            arr = np.clip(np.round(imgs[i].transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(root / "images" / f"{name}.png")
            if bundle.manifest.task == "classification":
                rows.append([name, split, int(bundle.labels[split][i])])
            else:
                flat = bundle.coords[split][i].reshape(-1)
                rows.append([name, split] + [f"{v:.4f}" for v in flat])
    with open(root / "labels.csv", "w") as fh:
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def load_dataset(root: Union[str, Path]) -> DataBundle:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    images = {s: [] for s in manifest.split_sizes}
    labels = {s: [] for s in manifest.split_sizes}
    coords = {s: [] for s in manifest.split_sizes}
    with open(root / "labels.csv") as fh:
        for line in fh:
            parts = line.strip().split(",")
            if not parts or not parts[0]:
                continue
            name, split = parts[0], parts[1]
            arr = np.asarray(Image.open(root / "images" / f"{name}.png"), dtype=np.float32) / 255.0
            images[split].append(arr.transpose(2, 0, 1))
            if manifest.task == "classification":
                labels[split].append(int(parts[2]))
            else:
                vals = np.array([float(v) for v in parts[2:]], dtype=np.float32)
                coords[split].append(vals.reshape(-1, 2))
    bundle = DataBundle(
        manifest=manifest,
        images={s: np.stack(v) for s, v in images.items()},
    )
    if manifest.task == "classification":
        bundle.labels = {s: np.asarray(v, dtype=np.int64) for s, v in labels.items()}
    else:
        bundle.coords = {s: np.stack(v) for s, v in coords.items()}
    return bundle
