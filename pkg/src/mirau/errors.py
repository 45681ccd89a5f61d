"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class DataError(RuntimeError):
    """Unreadable or inconsistent input data."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be read."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    """Resuming with a config whose hash differs from the checkpoint's."""
