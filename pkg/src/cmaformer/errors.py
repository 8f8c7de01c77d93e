"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class InputError(ValueError):
    """Input values fall outside an operation's domain."""


class InfeasibleError(ValueError):
    """A constraint set admits no feasible point."""


class TrainingError(RuntimeError):
    """Training cannot proceed (empty batch, non-finite loss, ...)."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DataError(RuntimeError):
    """Dataset directory missing or malformed."""
