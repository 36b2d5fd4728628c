"""Gaussian-weighted sliding-window prediction and coarse-to-fine inference."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data.preprocess import (
    clip_hu,
    foreground_box,
    from_rai,
    nearest_resize,
    paste_box,
    reorient_rai,
    resample_to,
    zscore,
)
from .data.volume import Case, Volume
from .metrics import largest_component_per_class

log = logging.getLogger(__name__)

# array [1, 1, X, Y, Z] -> probabilities [1, C, X, Y, Z]
PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class InferenceConfig:
    coarse_extents: tuple[int, int, int] = (32, 24, 32)  # patch covers 2/3 of axis 1, so the window slides there
    fine_extents: tuple[int, int, int] = (32, 16, 32)
    patch: tuple[int, int, int] = (32, 16, 32)
    pad_fraction: float = 0.10
    sigma_scale: float = 1.0 / 8.0
    clip: tuple[float, float] = (-300.0, 300.0)
    connectivity: int = 26


@dataclass(frozen=True)
class SlidingPlan:
    patch: tuple[int, int, int]
    starts: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    step: tuple[int, int, int]

    def windows(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.starts))


def gaussian_importance(patch_extents: Sequence[int], sigma_scale: float = 1.0 / 8.0) -> np.ndarray:
    """Separable Gaussian centred on the patch, peak 1, floored at 1e-8."""
    weights = np.ones((), dtype=np.float64)
    for n in patch_extents:
        if n < 1:
            raise ValueError(f"patch extents must be >= 1, got {tuple(patch_extents)}")
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        sigma = n * sigma_scale
        g = np.exp(-0.5 * (x / sigma) ** 2)
        weights = np.multiply.outer(weights, g)
    weights = weights / weights.max()
    return np.maximum(weights, 1e-8)


def make_sliding_plan(volume_extents: Sequence[int], patch_extents: Sequence[int]) -> SlidingPlan:
    """Window starts at multiples of half a patch, last window flush with the edge."""
    starts, steps = [], []
    for ax, (n, p) in enumerate(zip(volume_extents, patch_extents)):
        if p > n:
            raise ValueError(f"axis {ax}: patch {p} exceeds volume extent {n}")
        step = max(p // 2, 1)
        s = list(range(0, n - p + 1, step))
        if s[-1] != n - p:
            s.append(n - p)
        starts.append(tuple(s))
        steps.append(step)
    return SlidingPlan(tuple(int(p) for p in patch_extents), tuple(starts), tuple(steps))


def sliding_window_predict(
    predict: PredictFn,
    volume: np.ndarray,
    plan: SlidingPlan,
    importance: np.ndarray,
    windows: Optional[Sequence[tuple[int, int, int]]] = None,
) -> np.ndarray:
    """Importance-weighted average of per-window probabilities, [C, X, Y, Z].

    Kept as a running weighted mean, so a voxel seen by one window, or by
    windows that agree, gets the window output back exactly.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError(f"volume must be 3-D, got {vol.shape}")
    px, py, pz = plan.patch
    mean = None
    wsum = np.zeros(vol.shape, dtype=np.float64)
    for sx, sy, sz in windows if windows is not None else plan.windows():
        sl = (slice(sx, sx + px), slice(sy, sy + py), slice(sz, sz + pz))
        probs = np.asarray(predict(vol[sl][None, None]))[0].astype(np.float64)
        if mean is None:
            mean = np.zeros((probs.shape[0],) + vol.shape, dtype=np.float64)
        wsum[sl] += importance
        csl = (slice(None),) + sl
        mean[csl] += (importance / wsum[sl]) * (probs - mean[csl])
    if mean is None:
        raise ValueError("sliding plan has no windows")
    if np.any(wsum == 0):
        raise ValueError("sliding plan leaves voxels uncovered")
    return mean


def _model_fn(model) -> PredictFn:
    if callable(getattr(model, "predict", None)):
        return model.predict
    return model


def _intensity(v: Volume, clip) -> Volume:
    return zscore(clip_hu(v, *clip))


def coarse_segment(model, image: Volume, cfg: InferenceConfig) -> np.ndarray:
    """Coarse labels on the RAI grid of ``image`` (whole-volume resample + sliding window)."""
    rai = reorient_rai(image)
    coarse = _intensity(resample_to(rai, cfg.coarse_extents, "trilinear"), cfg.clip)
    patch = tuple(min(p, n) for p, n in zip(cfg.patch, cfg.coarse_extents))
    plan = make_sliding_plan(cfg.coarse_extents, patch)
    probs = sliding_window_predict(_model_fn(model), coarse.data, plan, gaussian_importance(patch, cfg.sigma_scale))
    labels = largest_component_per_class(np.argmax(probs, axis=0).astype(np.uint8), cfg.connectivity)
    return nearest_resize(labels, rai.extents)


def fine_segment(model, rai_image: Volume, box, cfg: InferenceConfig) -> np.ndarray:
    """Fine labels inside ``box`` of the RAI image, at crop resolution."""
    (x0, x1), (y0, y1), (z0, z1) = box
    crop = rai_image.with_data(np.ascontiguousarray(rai_image.data[x0:x1, y0:y1, z0:z1]))
    fine = _intensity(resample_to(crop, cfg.fine_extents, "trilinear"), cfg.clip)
    probs = _model_fn(model)(fine.data[None, None])[0]
    labels = largest_component_per_class(np.argmax(probs, axis=0).astype(np.uint8), cfg.connectivity)
    return nearest_resize(labels, crop.extents)


@dataclass
class InferenceResult:
    label: Volume  # fine result on the original grid
    coarse_label: Volume  # coarse result on the original grid
    box: tuple  # crop box on the RAI grid
    fallback: bool


def coarse_to_fine_infer(coarse_model, fine_model, case: Case | Volume, cfg: InferenceConfig = InferenceConfig()) -> InferenceResult:
    """Segment one image with the coarse and fine students; the input is not modified."""
    image = case.image if isinstance(case, Case) else case
    rai = reorient_rai(image)
    coarse = coarse_segment(coarse_model, image, cfg)
    fallback = False
    try:
        box = foreground_box(coarse, cfg.pad_fraction)
    except ValueError:
        log.warning("coarse mask is empty; using the whole volume as the fine crop")
        box = tuple((0, n) for n in rai.extents)
        fallback = True
    fine = fine_segment(fine_model, rai, box, cfg)
    full = paste_box(fine, box, rai.extents, fill=0)

    def to_original(arr: np.ndarray) -> Volume:
        return Volume(
            from_rai(arr.astype(np.uint8), image.direction),
            spacing=image.spacing,
            direction=image.direction.copy(),
            kind="mask",
            meta=dict(image.meta),
        )

    return InferenceResult(to_original(full), to_original(coarse), box, fallback)
