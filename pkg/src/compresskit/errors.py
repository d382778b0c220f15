"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid range."""


class DomainError(ValueError):
    """A function was evaluated outside its mathematical domain."""


class ContractError(RuntimeError):
    """An API precondition on program state was violated."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class SpecError(ValueError):
    """A model specification is malformed."""


class ConfigError(ValueError):
    """A run configuration or artifact combination is invalid."""


class DataError(ValueError):
    """Input data violates a structural requirement."""


class EvaluationError(ValueError):
    """A metric cannot be computed from the supplied inputs."""


class MeasurementError(RuntimeError):
    """A timing measurement is unusable."""
