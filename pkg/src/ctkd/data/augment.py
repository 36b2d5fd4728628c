"""Paired random augmentation for training patches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    p_rotation: float = 0.2
    max_rotation_deg: float = 15.0
    p_scale: float = 0.2
    scale_range: tuple[float, float] = (0.85, 1.25)
    p_elastic: float = 0.2
    elastic_magnitude: float = 2.0  # voxels
    elastic_sigma: float = 4.0  # voxels
    p_noise: float = 0.2
    max_noise_std: float = 0.1
    p_brightness: float = 0.2
    max_brightness: float = 0.25
    crop: bool = True

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_rotation=0, p_scale=0, p_elastic=0, p_noise=0, p_brightness=0, crop=False)


def _rotation(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    patch: Optional[Sequence[int]] = None,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Random geometric + intensity transform and crop of a 3-D image/mask pair.

    The same spatial transform is applied to both arrays (linear for the image,
    nearest for the mask). Intensity changes touch the image only.
    """
    shape = np.array(image.shape)
    if mask is not None and mask.shape != image.shape:
        raise ValueError(f"mask grid {mask.shape} != image grid {image.shape}")
    out_shape = np.array(patch if (patch is not None and cfg.crop) else image.shape, dtype=int)
    if np.any(out_shape > shape):
        raise ValueError(f"patch {tuple(out_shape)} larger than volume {tuple(shape)}")

    # Draws happen in a fixed order so a seed pins the result.
    do_rot = rng.random() < cfg.p_rotation
    angles = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3))
    do_scale = rng.random() < cfg.p_scale
    zoom = rng.uniform(*cfg.scale_range)
    do_elastic = rng.random() < cfg.p_elastic
    elastic_seed = int(rng.integers(2**31))
    start = np.array([rng.integers(0, n - m + 1) for n, m in zip(shape, out_shape)])
    do_noise = rng.random() < cfg.p_noise
    noise_std = rng.uniform(0, cfg.max_noise_std)
    noise_seed = int(rng.integers(2**31))
    do_bright = rng.random() < cfg.p_brightness
    shift = rng.uniform(-cfg.max_brightness, cfg.max_brightness)

    if do_rot or do_scale or do_elastic:
        center_out = (out_shape - 1) / 2.0
        center_in = start + center_out
        grid = np.indices(tuple(out_shape), dtype=np.float64).reshape(3, -1) - center_out[:, None]
        mat = np.eye(3)
        if do_rot:
            mat = _rotation(angles) @ mat
        if do_scale:
            mat = mat / zoom
        coords = mat @ grid + center_in[:, None]
        coords = coords.reshape((3,) + tuple(out_shape))
        if do_elastic:
            erng = np.random.default_rng(elastic_seed)
            for ax in range(3):
                field = ndimage.gaussian_filter(erng.uniform(-1, 1, tuple(out_shape)), cfg.elastic_sigma)
                peak = np.abs(field).max()
                if peak > 0:
                    coords[ax] += field / peak * cfg.elastic_magnitude
        img = ndimage.map_coordinates(image, coords, order=1, mode="nearest").astype(image.dtype)
        msk = None
        if mask is not None:
            msk = ndimage.map_coordinates(mask, coords, order=0, mode="nearest").astype(mask.dtype)
    else:
        sl = tuple(slice(s, s + m) for s, m in zip(start, out_shape))
        img = image[sl].copy()
        msk = mask[sl].copy() if mask is not None else None

    if do_noise:
        img = img + np.random.default_rng(noise_seed).normal(0, noise_std, img.shape).astype(img.dtype)
    if do_bright:
        img = img + np.asarray(shift, dtype=img.dtype)
    return img, msk
