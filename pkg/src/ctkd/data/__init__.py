"""Volumes, file formats, preprocessing, augmentation, phantoms and sampling."""

from .augment import AugmentConfig, augment
from .nifti import read_nifti, write_nifti
from .phantom import generate_phantom
from .preprocess import (
    clip_hu,
    crop_with_padding,
    foreground_box,
    from_rai,
    nearest_resize,
    paste_box,
    preprocess_image,
    reorient_rai,
    resample_to,
    to_rai,
    zscore,
)
from .sampler import EpochPlan, PlanStep, build_epoch_plan
from .volume import Case, Volume, axis_codes, direction_from_codes, load_volume, save_volume

__all__ = [
    "AugmentConfig",
    "Case",
    "EpochPlan",
    "PlanStep",
    "Volume",
    "augment",
    "axis_codes",
    "build_epoch_plan",
    "clip_hu",
    "crop_with_padding",
    "direction_from_codes",
    "foreground_box",
    "from_rai",
    "generate_phantom",
    "load_volume",
    "nearest_resize",
    "paste_box",
    "preprocess_image",
    "read_nifti",
    "reorient_rai",
    "resample_to",
    "save_volume",
    "to_rai",
    "write_nifti",
    "zscore",
]
