"""Shared error taxonomy; the CLI maps these onto process exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or command usage (exit code 1)."""


class DataError(ValueError):
    """Malformed or missing input data (exit code 2)."""


class InsufficientImagesError(DataError):
    """A label cannot supply the images an episode needs."""

    def __init__(self, label, needed, available):
        super().__init__(f"insufficient-images: label {label!r} needs {needed}, has {available}")
        self.label = label
        self.needed = needed
        self.available = available


class NumericError(ArithmeticError):
    """A numeric failure such as divergence or a failed gradient check (exit code 3)."""
