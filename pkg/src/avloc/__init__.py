"""Semi-supervised audio-visual sound source localization toolkit."""

__version__ = "0.1.0"

from .errors import (
    AnnotationParseError,
    ConfigError,
    DivergenceError,
    MediaError,
    ValidationError,
)

__all__ = [
    "AnnotationParseError",
    "ConfigError",
    "DivergenceError",
    "MediaError",
    "ValidationError",
    "__version__",
]
