"""Deterministic synthetic "blob-world" scenes with annotations for all
four task heads (class label, boxes, points, mask), plus the hybrid-scale
square cropping preprocessor.

Every scene is derived from (seed, index) through a Philox counter-based
generator, so generation order and parallelism cannot change results.
Annotation geometry (counts, centers, tight ellipse bounds, rasterized
mask) is closed-form arithmetic on the drawn values; images add only
elementwise noise, no filtering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class BlobConfig:
    canvas: int = 64
    count_buckets: tuple[tuple[int, int], ...] = ((1, 2), (3, 4), (5, 6))
    n_blob_classes: int = 3
    radius_range: tuple[float, float] = (4.0, 8.0)
    aspect_range: tuple[float, float] = (0.55, 1.0)
    background_range: tuple[float, float] = (0.08, 0.3)
    background_noise: float = 0.03
    color_jitter: float = 0.08
    palette: tuple[tuple[float, float, float], ...] | None = None
    # blob class follows the scene class so color separates the classes
    # (the linear-probe regime); otherwise blob classes are independent
    separable_colors: bool = False
    # calibrated once over 1000 default-config scenes, then frozen
    target_mask_fraction: float = 0.025
    train_fraction: float = 0.8

    def __post_init__(self):
        if not self.count_buckets:
            raise ConfigError("need at least one count bucket")
        max_count = max(hi for _, hi in self.count_buckets)
        r_hi = self.radius_range[1]
        if max_count * math.pi * r_hi * r_hi > 0.8 * self.canvas * self.canvas:
            raise ConfigError(
                "blob count range exceeds canvas capacity "
                f"(canvas {self.canvas}, max {max_count} blobs of radius {r_hi})")

    @property
    def n_classes(self) -> int:
        return len(self.count_buckets)


@dataclass
class Blob:
    cx: float
    cy: float
    rx: float
    ry: float
    theta: float
    blob_class: int
    color: np.ndarray

    @property
    def extent(self) -> tuple[float, float]:
        """Axis-aligned half extents of the rotated ellipse (tight)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        ex = math.sqrt((self.rx * c) ** 2 + (self.ry * s) ** 2)
        ey = math.sqrt((self.rx * s) ** 2 + (self.ry * c) ** 2)
        return ex, ey


@dataclass
class LabeledSample:
    """One scene with payloads for every task."""

    image: np.ndarray          # (S, S, 3) float in [0, 1]
    label: int                 # scene class (bucketed blob count)
    mask: np.ndarray           # (S, S) uint8, 0 = background, c+1 = blob class c
    points: np.ndarray         # (count, 2) float (x, y) centers
    boxes: np.ndarray          # (count, 5) float (x0, y0, x1, y1, class)
    count: int
    index: int
    split: str

    def __post_init__(self):
        if not (len(self.points) == len(self.boxes) == self.count):
            raise ConfigError("annotation consistency violated")
        if len(self.boxes):
            b = self.boxes
            if (b[:, 0] >= b[:, 2]).any() or (b[:, 1] >= b[:, 3]).any():
                raise ConfigError("degenerate box")
            s = self.image.shape[0]
            if (b[:, :4] < -1e-9).any() or (b[:, :4] > s + 1e-9).any():
                raise ConfigError("box outside image bounds")


def _splitmix64(x: int) -> int:
    """Documented 64-bit mix used for the train/test index hash."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def split_of_index(seed: int, index: int, train_fraction: float) -> str:
    h = _splitmix64((seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(index))
    return "train" if (h % 10 ** 6) / 10 ** 6 < train_fraction else "test"


def _class_color(c: int, n: int) -> np.ndarray:
    """Fixed palette: hues spread over the wheel, saturated and bright."""
    h = (c / max(n, 1)) * 6.0
    i = int(h) % 6
    f = h - int(h)
    v, p, q, t = 0.85, 0.2, 0.85 - 0.65 * f, 0.2 + 0.65 * f
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def generate_scene(config: BlobConfig, seed: int, index: int) -> LabeledSample:
    """One deterministic scene; randomness depends only on (seed, index)."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed),
                                               counter=[0, 0, 0, np.uint64(index)]))
    s = config.canvas
    scene_class = index % config.n_classes
    lo, hi = config.count_buckets[scene_class]
    count = int(rng.integers(lo, hi + 1))

    base = rng.uniform(*config.background_range, 3)
    img = np.clip(base + rng.normal(0.0, config.background_noise, (s, s, 3)), 0.0, 1.0)
    mask = np.zeros((s, s), dtype=np.uint8)
    yy, xx = np.mgrid[0:s, 0:s]
    blobs = []
    for _ in range(count):
        rx = rng.uniform(*config.radius_range)
        ry = rx * rng.uniform(*config.aspect_range)
        theta = rng.uniform(0.0, math.pi)
        if config.separable_colors:
            blob_class = scene_class % config.n_blob_classes
        else:
            blob_class = int(rng.integers(0, config.n_blob_classes))
        if config.palette is not None:
            base_color = np.asarray(config.palette[blob_class % len(config.palette)])
        else:
            base_color = _class_color(blob_class, config.n_blob_classes)
        color = np.clip(base_color
                        + rng.uniform(-config.color_jitter, config.color_jitter, 3),
                        0.0, 1.0)
        b = Blob(0.0, 0.0, rx, ry, theta, blob_class, color)
        ex, ey = b.extent
        b.cx = float(rng.uniform(ex, s - ex))
        b.cy = float(rng.uniform(ey, s - ey))
        blobs.append(b)
        c, sn = math.cos(theta), math.sin(theta)
        dx, dy = xx + 0.5 - b.cx, yy + 0.5 - b.cy
        u = (dx * c + dy * sn) / rx
        v = (-dx * sn + dy * c) / ry
        inside = u * u + v * v <= 1.0
        img[inside] = color
        mask[inside] = blob_class + 1

    points = np.array([[b.cx, b.cy] for b in blobs]).reshape(count, 2)
    boxes = np.zeros((count, 5))
    for i, b in enumerate(blobs):
        ex, ey = b.extent
        boxes[i] = (b.cx - ex, b.cy - ey, b.cx + ex, b.cy + ey, b.blob_class)
    return LabeledSample(
        image=img, label=scene_class, mask=mask, points=points, boxes=boxes,
        count=count, index=index,
        split=split_of_index(seed, index, config.train_fraction))


def gen_blobworld(config: BlobConfig, seed: int, n: int) -> list[LabeledSample]:
    """n deterministic scenes with all four task annotations."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    return [generate_scene(config, seed, i) for i in range(n)]


def split_samples(samples: list[LabeledSample]
                  ) -> tuple[list[LabeledSample], list[LabeledSample]]:
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    return train, test


def linear_probe_dataset(seed: int, n: int, canvas: int = 32) -> list[LabeledSample]:
    """The separable 3-class set: scene class determines blob color (pure
    red/green/blue on a dark gray background) and count bucket, so a
    linear probe on frozen features can saturate."""
    cfg = BlobConfig(canvas=canvas, count_buckets=((1, 1), (2, 2), (4, 4)),
                     radius_range=(4.0, 6.0), separable_colors=True,
                     background_range=(0.1, 0.18), background_noise=0.02,
                     color_jitter=0.04,
                     palette=((0.95, 0.1, 0.1), (0.1, 0.9, 0.15), (0.15, 0.2, 0.95)))
    return gen_blobworld(cfg, seed, n)


# -- hybrid-scale square cropping ---------------------------------------------


def hybrid_crop(image: np.ndarray, rng: np.random.Generator,
                min_side: int = 64, max_side: int = 128) -> np.ndarray | None:
    """Square crop with side drawn uniformly from [min_side, max_side] and
    uniform position. Undersized images are skipped (None), not padded."""
    if min_side > max_side or min_side < 1:
        raise ConfigError(f"invalid crop range [{min_side}, {max_side}]")
    h, w = image.shape[:2]
    if min(h, w) < min_side:
        return None
    side = int(rng.integers(min_side, min(max_side, h, w) + 1))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return image[top:top + side, left:left + side].copy()


def hybrid_crop_all(images: list[np.ndarray], rng: np.random.Generator,
                    min_side: int = 64, max_side: int = 128
                    ) -> tuple[list[np.ndarray], int]:
    """Crop a batch; returns (crops, skipped_count)."""
    crops, skipped = [], 0
    for img in images:
        crop = hybrid_crop(img, rng, min_side, max_side)
        if crop is None:
            skipped += 1
        else:
            crops.append(crop)
    return crops, skipped
