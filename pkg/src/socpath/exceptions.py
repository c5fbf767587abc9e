"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent settings (grid, model, run config)."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DimensionError(ValueError):
    """Configuration vector does not match the model geometry."""


class EstimationError(RuntimeError):
    """An estimator could not produce a value (e.g. every path invalid)."""


class ConvergenceError(RuntimeError):
    """An iterative or resolution-doubling procedure did not converge."""


class ArchitectureError(ValueError):
    """Checkpoint architecture is incompatible with the requested use."""
