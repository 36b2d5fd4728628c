"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class UnsupportedOrientationError(ValueError):
    """Direction matrix is too oblique to snap onto voxel axes."""


class UnsupportedFormatError(ValueError):
    """A volume file uses a feature the reader does not handle."""


class EmptyMaskError(ValueError):
    """A mask required to contain foreground is empty."""


class GenerationError(RuntimeError):
    """Phantom generation could not satisfy its placement constraints."""


class DivergedTrainingError(RuntimeError):
    """A training loss became NaN or infinite."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"loss diverged to {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value
