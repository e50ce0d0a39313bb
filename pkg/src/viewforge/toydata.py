"""Synthetic labeled image sets for desk-scale training and benchmarks.

The class signal is a global color direction (so random crops preserve it)
with per-image intensity and per-pixel noise as nuisance factors. Good
representations must keep the color statistics while shrugging off the
noise, which is exactly what crop+noise view pairs reward.
"""

from __future__ import annotations

import numpy as np

from .container import ImageRecord
from .rng import RngStream, LANE_DATA

CLASS_COLORS = np.array(
    [
        [205, 65, 60],
        [60, 205, 70],
        [65, 70, 205],
        [200, 195, 60],
    ],
    dtype=np.float64,
)


def make_toy_class_dataset(
    n_images: int,
    image_size: int = 16,
    num_classes: int = 4,
    seed: int = 0,
    noise_std: float = 18.0,
    intensity_range: tuple[float, float] = (0.6, 1.0),
) -> list[ImageRecord]:
    """Images whose global color encodes the class; labels cycle 0..C-1."""
    if num_classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes supported")
    records = []
    for i in range(n_images):
        label = i % num_classes
        g = RngStream(seed, sample=i).substream(0, domain=LANE_DATA)
        intensity = g.uniform(*intensity_range)
        base = intensity * CLASS_COLORS[label]
        pixels = base[None, None, :] + g.normal(0.0, noise_std, size=(image_size, image_size, 3))
        records.append(
            ImageRecord(
                pixels=np.clip(np.rint(pixels), 0, 255).astype(np.uint8),
                label=label,
            )
        )
    return records


def make_random_images(
    n_images: int,
    height: int = 64,
    width: int = 64,
    channels: int = 3,
    seed: int = 0,
) -> list[ImageRecord]:
    """Unstructured uint8 noise; for loader and container stress tests."""
    records = []
    for i in range(n_images):
        g = RngStream(seed, sample=i).substream(1, domain=LANE_DATA)
        pixels = g.integers(0, 256, size=(height, width, channels), dtype=np.uint8)
        records.append(ImageRecord(pixels=pixels, label=i % 1000))
    return records
