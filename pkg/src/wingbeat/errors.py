"""Exception types shared across the package."""


class WingbeatError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(WingbeatError, ValueError):
    """Invalid configuration value or combination."""


class TrainingError(WingbeatError, RuntimeError):
    """Training cannot proceed (missing class, too few samples, ...)."""


class ModelFormatError(WingbeatError, ValueError):
    """A serialized model document is malformed."""


class ModelVersionError(ModelFormatError):
    """A serialized model document has an unsupported version."""


class SessionError(WingbeatError, RuntimeError):
    """A streaming session was used after close or in a wrong mode."""


class StreamOverflowError(WingbeatError, RuntimeError):
    """Producer outran the stream ring buffer."""

    def __init__(self, dropped_samples: int):
        super().__init__(f"ring buffer overflow: {dropped_samples} samples would be dropped")
        self.dropped_samples = dropped_samples
