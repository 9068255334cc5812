"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A model/run configuration is internally inconsistent or invalid."""


class InputError(ValueError):
    """Runtime data handed to an operation violates its contract."""


class CheckpointError(ValueError):
    """A checkpoint file is missing required header fields or is unreadable."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; the run is aborted."""
