"""Exception types shared across the package."""


class ManifoldProbeError(Exception):
    """Base class for all package errors."""


class DimensionError(ManifoldProbeError, ValueError):
    """Array shapes do not line up with the map or operator."""


class CapacityError(ManifoldProbeError):
    """A dense object would exceed the configured size cap."""


class SpecError(ManifoldProbeError, ValueError):
    """A generator or layer specification is malformed."""


class ArgumentError(ManifoldProbeError, ValueError):
    """An argument is outside the operation's domain."""


class NumericalError(ManifoldProbeError, ArithmeticError):
    """A numerical procedure produced unusable values."""


class TrainingError(NumericalError):
    """Training stopped without reaching the target loss."""

    def __init__(self, message, final_loss):
        super().__init__(message)
        self.final_loss = final_loss


class ConvergenceError(NumericalError):
    """An iterative eigensolver ran out of iterations.

    ``best`` holds the best-so-far :class:`~manifold_probe.metric.MetricTensor`.
    """

    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


class DegenerateSpectrumError(NumericalError):
    """A spectrum carries no positive mass."""


class DivergenceError(NumericalError):
    """An optimizer hit a non-finite loss; ``trace`` holds progress so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class InversionError(NumericalError):
    """Every restart of an inversion diverged."""


class FormatError(ManifoldProbeError, OSError):
    """A file on disk is truncated or not in the expected format."""
