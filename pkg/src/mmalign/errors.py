"""Exception types shared across the package."""


class ParseError(ValueError):
    """A data file line could not be parsed (message carries path and line number)."""


class ValidationError(ValueError):
    """Parsed data violates a structural constraint (bounds, uniqueness, ...)."""


class FormatError(ValueError):
    """A feature file header or payload does not match the declared layout."""


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration values."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be loaded: version or manifest-hash mismatch, missing arrays."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; carries a diagnostic dump path."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
