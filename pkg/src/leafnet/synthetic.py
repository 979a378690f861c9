"""Small synthetic image tasks for desk-scale training runs.

Each class is a fill colour; every image is a noisy grey background with one
square or disc painted in its class colour. The classes are separable by
per-channel statistics, which makes them learnable in a handful of epochs.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .data import ArrayDataset

# Task B colours differ from task A's but keep the same dominant channel per
# class, so features learned on A carry over.
PALETTE_A = ((0.85, 0.15, 0.15), (0.15, 0.75, 0.2), (0.2, 0.3, 0.9))
PALETTE_B = ((0.95, 0.55, 0.1), (0.35, 0.9, 0.6), (0.5, 0.35, 0.95))


def color_shapes(
    n: int,
    palette: Sequence[Tuple[float, float, float]] = PALETTE_A,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.08,
    color_jitter: float = 0.08,
) -> ArrayDataset:
    """``n`` images, classes assigned round-robin so counts stay balanced."""
    rng = np.random.default_rng(seed)
    k = len(palette)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        background = rng.uniform(0.35, 0.65)
        img = np.full((3, size, size), background) + rng.normal(0.0, noise, (3, size, size))
        half = rng.integers(size // 5, size // 3 + 1)
        cy, cx = rng.integers(half, size - half, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
        colour = np.asarray(palette[c]) + rng.uniform(-color_jitter, color_jitter, 3)
        img[:, mask] = colour[:, None] + rng.normal(0.0, noise, (3, int(mask.sum())))
        images[i] = np.clip(img, 0.0, 1.0)
    return ArrayDataset(images, labels, ids=[f"img_{i:04d}" for i in range(n)])


def train_test(
    n: int, palette=PALETTE_A, test_fraction: float = 0.2, seed: int = 0, **kwargs
) -> Tuple[ArrayDataset, ArrayDataset]:
    full = color_shapes(n, palette, seed=seed, **kwargs)
    n_test = int(round(n * test_fraction))
    return full.subset(range(n_test, n)), full.subset(range(n_test))
