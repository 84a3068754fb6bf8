"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (2 for configuration,
validation and load problems, 3 for numeric aborts).
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown option name."""


class ShapeError(ValueError):
    """Tensor shapes that cannot be combined."""


class ValidationError(ValueError):
    """Dataset layout or content that fails validation."""


class DecodeError(ValueError):
    """An image file that cannot be decoded as RGB."""


class LoadError(OSError):
    """A weight or checkpoint file that is missing or unreadable."""


class NumericError(ArithmeticError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, value: float, checkpoint: str | None = None):
        self.term = term
        self.value = value
        self.checkpoint = checkpoint
        msg = f"loss term {term!r} is not finite ({value})"
        if checkpoint is not None:
            msg += f"; last good checkpoint: {checkpoint}"
        super().__init__(msg)
