class QFlowError(Exception):
    pass


class InvalidConfigurationError(QFlowError, ValueError):
    pass


class DomainError(QFlowError, ValueError):
    pass


class UnsupportedError(QFlowError, ValueError):
    """Requested operator, model or dimension is outside what is implemented."""


class NonHermitianGeneratorError(QFlowError, ValueError):
    """Compiled operator keeps an imaginary part: the term list is not a physical generator."""


class StepTooLargeError(QFlowError, RuntimeError):
    """Every sample needed clamping of 1 + dt * ratio; reduce dt."""


class SingularMetricError(QFlowError, RuntimeError):
    pass


class CutoffError(QFlowError, ValueError):
    """Fock-space truncation is too small for the requested accuracy."""
