"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An input violates a documented precondition."""


class InvalidState(RuntimeError):
    """An object is not in a state where the operation is defined."""


class ConfigError(ValueError):
    """A configuration key or value is unknown or invalid."""


class InvalidCheckpoint(RuntimeError):
    """A checkpoint does not match the architecture it declares."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class ConfigurationWarning(UserWarning):
    """A configuration is legal but almost certainly unintended."""
