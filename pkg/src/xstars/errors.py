"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A scalar argument is outside its valid range."""


class ShapeError(ValueError):
    """Array arguments disagree on a required dimension."""


class NumericsError(FloatingPointError):
    """Inputs are numerically unusable (zero norms, broken invariants)."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


class ManifestError(ValueError):
    """A corpus manifest is missing, malformed or inconsistent."""


class DataError(RuntimeError):
    """A data file could not be produced or read."""


class TrainingError(RuntimeError):
    """Training had to abort; carries step diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ClampWarning(RuntimeWarning):
    """Probabilities were clamped before a logarithm."""
