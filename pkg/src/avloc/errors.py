"""Exception types shared across the toolkit.

The CLI maps ValidationError (and subclasses) to exit code 2 and every
other failure to exit code 1.
"""


class ValidationError(ValueError):
    """Input violates a documented contract (bad value, bad shape, bad range)."""


class AnnotationParseError(ValidationError):
    """Malformed annotation row; carries the offending line and field."""

    def __init__(self, message: str, *, line_no: int, field: str | None = None):
        detail = f"line {line_no}"
        if field:
            detail += f", field '{field}'"
        super().__init__(f"{message} ({detail})")
        self.line_no = line_no
        self.field = field


class ConfigError(ValidationError):
    """Invalid or inconsistent configuration."""


class MediaError(RuntimeError):
    """Missing or undecodable media (frames, audio streams)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; a diagnostic snapshot was written."""
