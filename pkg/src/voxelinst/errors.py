"""Exception types shared across the package."""


class VoxelinstError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VoxelinstError):
    """A config document is malformed; message carries the offending key path."""


class VolumeFormatError(VoxelinstError):
    """Raw volume payload disagrees with its sidecar (byte counts, dtype)."""


class SidecarMissingError(VoxelinstError):
    """Volume payload exists but the JSON sidecar does not."""


class GenerationError(VoxelinstError):
    """Synthetic dataset generation could not satisfy the config."""


class GraphBuildError(VoxelinstError):
    """Inconsistent shapes or channels while building a computation graph."""


class ContractError(VoxelinstError):
    """Caller violated an operation's documented precondition."""


class TrainingDivergedError(VoxelinstError):
    """Training loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
