"""Exception hierarchy. Validation errors map to CLI exit code 1, runtime failures to 2."""


class AdaptsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AdaptsError):
    """Invalid configuration, specification, or user input."""


class DataError(AdaptsError):
    """Dataset layout or image file problems."""


class ContainerError(AdaptsError):
    """Weight container is missing tensors, corrupt, or inconsistent."""


class ShapeError(AdaptsError):
    """Tensor shape mismatch at runtime."""


class MetricError(AdaptsError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class TrainingDiverged(AdaptsError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


VALIDATION_ERRORS = (ConfigError, DataError, ContainerError)
