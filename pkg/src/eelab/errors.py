"""Exception types shared across the eelab package."""


class EelabError(Exception):
    """Base class for all eelab-specific errors."""


class FlowDivergenceError(EelabError):
    """Time integration blew up (kinetic energy grew past the abort threshold)."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class InsufficientDataError(EelabError):
    """Not enough samples to perform the requested estimate."""


class IllConditionedError(EelabError):
    """Singular or near-singular least-squares system."""


class BasisDegeneracyError(EelabError):
    """An evolved basis lost orthonormality or a mode collapsed."""


class WindowOverflowError(EelabError):
    """Fundamental matrix overflowed during a window integration."""


class DegenerateDistributionError(EelabError):
    """Sample set has no spread, so no density can be estimated."""


class TrainingDivergedError(EelabError):
    """Optimization produced a non-finite loss."""


class ConfigError(EelabError):
    """Invalid pipeline configuration."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class MissingArtifactError(EelabError):
    """A pipeline stage requires an artifact that has not been produced."""

    def __init__(self, message, artifact=None):
        super().__init__(message)
        self.artifact = artifact
