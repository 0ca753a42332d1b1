"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when inputs break a documented shape or value contract."""


class DivergenceError(RuntimeError):
    """A time-stepping loop produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(RuntimeError):
    """Newton iterations did not reach the requested tolerance."""

    def __init__(self, message, step=None, residual=None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during network training."""


class MissingArtifactError(LookupError):
    """A requested model or sweep result has not been produced."""
