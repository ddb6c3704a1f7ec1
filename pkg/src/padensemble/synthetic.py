"""Synthetic stand-ins for the competition data: variably sized, imbalanced, class-colored."""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional

import numpy as np

from .corpus import ImageSample

OXML_COUNTS: Dict[int, int] = {-1: 36, 0: 14, 1: 12}
DESK_COUNTS: Dict[int, int] = {-1: 30, 0: 18, 1: 12}

# H&E-like tints per class: pale pink, mid purple, dark violet
CLASS_COLORS: Dict[int, tuple] = {-1: (225, 160, 190), 0: (170, 110, 185), 1: (105, 70, 150)}


def synth_image(rng: np.random.Generator, label: int, height: int, width: int, noise: float = 18.0) -> np.ndarray:
    base = np.asarray(CLASS_COLORS[label], dtype=np.float64)
    img = base + rng.normal(0.0, noise, size=(height, width, 3))
    # a few darker "nuclei" blobs; more of them for the carcinoma classes
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(rng.integers(1, 4) + (label + 1) * 2):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(1.5, max(2.0, min(height, width) / 6))
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] *= 0.75
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_corpus(
    counts: Mapping[int, int] = DESK_COUNTS,
    min_size: int = 32,
    max_size: int = 64,
    seed: int = 0,
    prefix: str = "img",
    labeled: bool = True,
    noise: float = 18.0,
) -> List[ImageSample]:
    """Generate ``counts[c]`` images per class with random sizes in ``[min_size, max_size]``.

    Ids are zero-padded so lexicographic order matches generation order.
    Classes are interleaved by a seeded shuffle.
    """
    rng = np.random.default_rng(seed)
    labels = [c for c in sorted(counts) for _ in range(counts[c])]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    width = max(3, len(str(len(labels))))
    out = []
    for i, label in enumerate(labels):
        h, w = (int(v) for v in rng.integers(min_size, max_size + 1, size=2))
        out.append(
            ImageSample(f"{prefix}_{i:0{width}d}", synth_image(rng, label, h, w, noise), label if labeled else None)
        )
    return out


def make_unlabeled(n: int, min_size: int = 32, max_size: int = 64, seed: int = 1, prefix: str = "test") -> List[ImageSample]:
    rng = np.random.default_rng(seed)
    classes = sorted(CLASS_COLORS)
    counts: Dict[int, int] = {c: 0 for c in classes}
    for c in rng.choice(classes, size=n):
        counts[int(c)] += 1
    return make_corpus(counts, min_size, max_size, seed, prefix, labeled=False)
