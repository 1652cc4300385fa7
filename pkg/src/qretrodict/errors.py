"""Exception hierarchy shared across the package."""


class QRetrodictError(Exception):
    """Base class for all estimator and configuration errors."""


class DimensionError(QRetrodictError, ValueError):
    pass


class NonHermitianError(QRetrodictError, ValueError):
    pass


class GridError(QRetrodictError, ValueError):
    """A time does not fall on the integration grid."""


class PropagationError(QRetrodictError, FloatingPointError):
    """Non-finite values or loss of positivity while integrating."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ZeroProbabilityOutcome(QRetrodictError):
    """Conditioning on an outcome whose probability is numerically zero."""

    def __init__(self, label, probability, t=None):
        where = "" if t is None else f" at t={t:g}"
        super().__init__(
            f"outcome {label!r} has probability {probability:.3e}{where}")
        self.label = label
        self.probability = probability
        self.t = t


class ZeroNormalizer(QRetrodictError):
    """The record is impossible under the model (vanishing likelihood)."""


class ZeroProbabilityRecord(QRetrodictError):
    """A discrete record with zero probability was conditioned on."""


class ConfigError(QRetrodictError, ValueError):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)
