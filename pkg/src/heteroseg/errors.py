"""Exception types shared across the package."""


class HeterosegError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(HeterosegError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class DataError(HeterosegError):
    """Missing or malformed dataset inputs (CLI exit code 3)."""


class TrainingDiverged(HeterosegError):
    """Non-finite loss encountered during optimization (CLI exit code 4)."""

    def __init__(self, step: int, center_id: str, message: str = ""):
        self.step = step
        self.center_id = center_id
        detail = message or "non-finite loss"
        super().__init__(f"training diverged at step {step} (center {center_id}): {detail}")
