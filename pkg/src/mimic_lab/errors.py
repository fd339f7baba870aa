"""Exception types shared across the package."""


class MimicLabError(Exception):
    """Base class for all package errors."""


class ClipFormatError(MimicLabError):
    """Malformed or inconsistent motion clip file."""


class SchemaError(MimicLabError):
    """Dimension or layout mismatch between components."""


class ConfigError(MimicLabError):
    """Invalid configuration value or file."""


class SimulationDiverged(MimicLabError):
    """Non-finite values appeared in the physics state."""


class TrainingDiverged(MimicLabError):
    """Optimization produced a non-finite loss.

    Carries the path of the last good checkpoint when one exists.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
