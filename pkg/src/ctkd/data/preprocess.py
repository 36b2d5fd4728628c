"""Reorientation, resampling, intensity clipping/normalization and cropping."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autodiff.conv import resize_array
from ..errors import EmptyMaskError
from .volume import Volume, axis_codes

Box = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


# --------------------------------------------------------------- orientation
def orientation_transform(direction: np.ndarray) -> tuple[tuple[int, int, int], tuple[bool, bool, bool]]:
    """(perm, flips) such that ``flip(transpose(data, perm))`` is RAI.

    Output axis ``i`` comes from voxel axis ``perm[i]``; it is reversed when
    ``flips[i]`` is set.
    """
    codes = axis_codes(direction)
    target = "RAI"
    opposite = {"R": "L", "A": "P", "I": "S"}
    perm, flips = [], []
    for letter in target:
        for j, c in enumerate(codes):
            if c == letter or c == opposite[letter]:
                perm.append(j)
                flips.append(c != letter)
    return tuple(perm), tuple(flips)


def to_rai(data: np.ndarray, direction: np.ndarray) -> np.ndarray:
    perm, flips = orientation_transform(direction)
    out = np.transpose(data, perm)
    for ax, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=ax)
    return np.ascontiguousarray(out)


def from_rai(data: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_rai` for the original ``direction``."""
    perm, flips = orientation_transform(direction)
    out = data
    for ax, f in enumerate(flips):
        if f:
            out = np.flip(out, axis=ax)
    return np.ascontiguousarray(np.transpose(out, np.argsort(perm)))


def reorient_rai(v: Volume) -> Volume:
    """Permute/flip axes so the grid runs R->L, A->P, I->S."""
    perm, _ = orientation_transform(v.direction)
    if perm == (0, 1, 2) and axis_codes(v.direction) == "RAI":
        return v.with_data(v.data.copy(), direction=np.eye(3))
    return v.with_data(
        to_rai(v.data, v.direction),
        spacing=tuple(v.spacing[j] for j in perm),
        direction=np.eye(3),
    )


# ---------------------------------------------------------------- resampling
def nearest_resize(arr: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resize with the half-pixel-center convention."""
    idx = []
    for n_in, n_out in zip(arr.shape[-3:], target):
        src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
        idx.append(np.minimum(src, n_in - 1))
    return arr[..., idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]


def resample_to(v: Volume, target_extents: Sequence[int], mode: str | None = None) -> Volume:
    """Resample to fixed extents: trilinear for images, nearest for masks."""
    target = tuple(int(n) for n in target_extents)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target extents must be three values >= 1, got {target_extents}")
    mode = mode or ("nearest" if v.kind == "mask" else "trilinear")
    if mode == "trilinear":
        if v.kind == "mask":
            raise ValueError("trilinear resampling of a label mask would invent labels; use nearest")
        data = resize_array(np.asarray(v.data, dtype=np.float32 if v.data.dtype != np.float64 else np.float64), target)
    elif mode == "nearest":
        data = nearest_resize(v.data, target)
    else:
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    spacing = tuple(s * n / m for s, n, m in zip(v.spacing, v.extents, target))
    return v.with_data(np.ascontiguousarray(data), spacing=spacing)


# ----------------------------------------------------------------- intensity
def clip_hu(v: Volume, lo: float = -300.0, hi: float = 300.0) -> Volume:
    if lo >= hi:
        raise ValueError(f"clip bounds need lo < hi, got [{lo}, {hi}]")
    if v.kind != "image":
        raise ValueError("clip_hu applies to images only")
    return v.with_data(np.clip(v.data, lo, hi))


def zscore_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    x64 = x.astype(np.float64)
    out = (x64 - x64.mean()) / (x64.std() + 1e-8)
    return out.astype(x.dtype if x.dtype.kind == "f" else np.float32)


def zscore(v: Volume) -> Volume:
    """(x - mean) / (std + 1e-8) over every voxel of the volume."""
    if v.kind != "image":
        raise ValueError("zscore applies to images only")
    return v.with_data(zscore_array(v.data))


# ------------------------------------------------------------------- cropping
def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def foreground_box(mask: np.ndarray, pad_fraction: float = 0.10) -> Box:
    """Bounding box of all nonzero labels, padded per axis and clamped."""
    mask = np.asarray(mask)
    if not mask.any():
        raise EmptyMaskError("mask has no foreground voxels to crop around")
    box = []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        hits = np.flatnonzero(mask.any(axis=other))
        lo, hi = int(hits[0]), int(hits[-1]) + 1
        pad = _round_half_up(pad_fraction * (hi - lo))
        box.append((max(lo - pad, 0), min(hi + pad, mask.shape[ax])))
    return tuple(box)


def crop_box(arr: np.ndarray, box: Box) -> np.ndarray:
    (x0, x1), (y0, y1), (z0, z1) = box
    return arr[..., x0:x1, y0:y1, z0:z1]


def crop_with_padding(image: Volume, mask, pad_fraction: float = 0.10) -> tuple[Volume, Box]:
    """Crop ``image`` to the padded foreground box of ``mask``."""
    m = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    if m.shape != image.extents:
        raise ValueError(f"mask grid {m.shape} != image grid {image.extents}")
    box = foreground_box(m, pad_fraction)
    return image.with_data(np.ascontiguousarray(crop_box(image.data, box))), box


def paste_box(values: np.ndarray, box: Box, extents: Sequence[int], fill=0) -> np.ndarray:
    """Place ``values`` at ``box`` inside a ``fill``-initialized grid."""
    out = np.full(tuple(extents), fill, dtype=values.dtype)
    (x0, x1), (y0, y1), (z0, z1) = box
    out[x0:x1, y0:y1, z0:z1] = values
    return out


def preprocess_image(v: Volume, target_extents: Sequence[int], clip=(-300.0, 300.0)) -> Volume:
    """Reorient, resample, clip and z-score an image."""
    v = reorient_rai(v)
    v = resample_to(v, target_extents, "trilinear")
    v = clip_hu(v, *clip)
    return zscore(v)
