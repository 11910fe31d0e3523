"""
Exception hierarchy for the splat overfitting lab.

Every error raised on purpose by the lab derives from ``LabError`` so the
suite runner can record a failed row and move on, and the CLI can map
errors onto exit codes.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all lab errors."""


class ConfigError(LabError, ValueError):
    """Invalid experiment, scene or preset configuration."""


class ContractError(LabError, ValueError):
    """A documented precondition of an operation was violated."""


class CorruptModelError(LabError):
    """Model parameters contain non-finite values."""


class CheckpointFormatError(LabError):
    """A checkpoint or scene container could not be parsed."""


class UnsupportedVersionError(CheckpointFormatError):
    """The container carries a version tag this build cannot read."""

    def __init__(self, version: int, supported: int):
        super().__init__(f"Unsupported container version {version} (supported: {supported})")
        self.version = version
        self.supported = supported


class DivergenceError(LabError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"Training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


class RunawayGrowthError(LabError):
    """Densification grew the cloud past its configured budget."""

    def __init__(self, iteration: int, count: int, limit: int):
        super().__init__(f"Cloud grew to {count} Gaussians at iteration {iteration} (limit {limit})")
        self.iteration = iteration
        self.count = count
        self.limit = limit


class DegenerateSampleError(LabError, ValueError):
    """Paired differences have zero spread; effect size is undefined."""

    def __init__(self, message: str, mean_difference: Optional[float] = None):
        super().__init__(message)
        self.mean_difference = mean_difference


class NoInformationError(LabError, ValueError):
    """All paired differences are zero."""


class UndefinedCorrelationError(LabError, ValueError):
    """Correlation requested on constant input."""

