"""Exception types shared across the package."""


class DimensionError(ValueError):
    """A tensor shape violates an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value, layer name, or flag combination."""


class ImageDecodeError(ValueError):
    """A file exists but does not decode as an image."""


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt, truncated, or belongs to another config."""


class TrainingError(RuntimeError):
    """Numerical failure during optimization (e.g. a NaN loss component)."""
