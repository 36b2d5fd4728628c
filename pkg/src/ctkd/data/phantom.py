"""Synthetic CT-like phantoms: non-overlapping labeled ellipsoids in noise."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from ..errors import GenerationError
from .volume import Case, Volume

BACKGROUND_HU = -100.0
NOISE_HU = 20.0


def class_intensity(c: int) -> float:
    """Mean HU of foreground class ``c`` (>= 1); distinct and inside [-300, 300]."""
    return -100.0 + 90.0 * (((c - 1) % 4) + 1) - 45.0 * ((c - 1) // 4)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Random rotation about axis 1, keeping the flat axis flat."""
    a = rng.uniform(0.0, np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def ellipsoid_mask(extents, center, semi_axes, rotation) -> np.ndarray:
    grid = np.indices(tuple(extents), dtype=np.float64).reshape(3, -1).T - np.asarray(center)
    local = grid @ rotation  # coordinates along the ellipsoid's own axes
    r2 = ((local / np.asarray(semi_axes)) ** 2).sum(axis=1)
    return (r2 <= 1.0).reshape(tuple(extents))


def generate_phantom(
    seed: int,
    extents: Sequence[int] = (48, 48, 48),
    num_classes: int = 4,
    case_id: str | None = None,
    split: str = "labeled",
    max_retries: int = 200,
) -> Case:
    """Deterministic phantom: one ellipsoid per foreground class.

    The ellipsoids sit inside a randomly placed cluster region about half the
    volume wide and flatter along axis 1, so a padded crop around them is
    markedly smaller than the field of view.
    """
    extents = tuple(int(n) for n in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ValueError(f"phantom extents must be >= 16 per axis, got {extents}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    n = np.array(extents, dtype=float)
    labels = np.zeros(extents, dtype=np.uint8)
    occupied = np.zeros(extents, dtype=bool)
    lo_axes = np.maximum(n * np.array([0.09, 0.07, 0.09]), 1.5)
    hi_axes = np.maximum(n * np.array([0.15, 0.11, 0.15]), 2.5)
    grow = 0.06 * max(num_classes - 4, 0)
    region = n * np.minimum(np.array([0.62, 0.42, 0.62]) + grow, 0.9)
    region = np.minimum(np.maximum(region, 12.0), n - 2.0)  # room for small grids
    region_lo = np.array([rng.uniform(1.0, m - r - 1.0) for m, r in zip(n, region)])

    for c in range(1, num_classes):
        for _ in range(max_retries):
            semi = rng.uniform(lo_axes, hi_axes)
            rot = _random_rotation(rng)
            half = np.sqrt(((rot * semi) ** 2).sum(axis=1))  # bounding half-extents
            lo = region_lo + half
            hi = region_lo + region - half
            if np.any(hi <= lo):
                continue
            center = rng.uniform(lo, hi)
            blob = ellipsoid_mask(extents, center, semi, rot)
            if not blob.any() or (ndimage.binary_dilation(blob, iterations=2) & occupied).any():
                continue
            labels[blob] = c
            occupied |= blob
            break
        else:
            raise GenerationError(f"could not place class {c} without overlap after {max_retries} tries (seed {seed})")

    image = np.full(extents, BACKGROUND_HU)
    jitter = rng.normal(0.0, 10.0, num_classes)
    for c in range(1, num_classes):
        image[labels == c] = class_intensity(c) + jitter[c]
    image = ndimage.gaussian_filter(image, 0.6)
    image += rng.normal(0.0, NOISE_HU, extents)
    case_id = case_id or f"phantom_{seed:05d}"
    return Case(
        case_id=case_id,
        image=Volume(image.astype(np.float32), kind="image"),
        label=Volume(labels, kind="mask"),
        split=split,
    )
