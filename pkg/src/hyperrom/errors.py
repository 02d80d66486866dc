"""Exception hierarchy shared by all stages."""


class HyperromError(Exception):
    """Base class for every error raised by this package."""


class InputError(HyperromError, ValueError):
    """Invalid argument: wrong dimension, out-of-range value, missing data."""


class SingularConfigurationError(HyperromError):
    """A bar collapsed to (numerically) zero current length."""


class DivergenceError(HyperromError):
    """Newton-Raphson failed to converge."""

    def __init__(self, message: str, step: int, residual: float):
        super().__init__(f"{message} (step {step}, residual {residual:.3e})")
        self.step = step
        self.residual = residual


class FormatError(HyperromError):
    """Corrupt, truncated or version-mismatched archive."""


class NumericError(HyperromError, FloatingPointError):
    """Non-finite intermediate value."""


class PipelineError(HyperromError):
    """Missing upstream artifact or inconsistent stage state."""
