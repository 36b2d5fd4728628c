"""Knowledge distillation from cross-teaching teachers for coarse-to-fine 3D segmentation."""

__version__ = "0.1.0"
