"""Exception types shared across the package."""


class TsParseError(ValueError):
    """Raised for malformed .ts input; message names the offending line."""


class ConfigurationError(ValueError):
    """Raised for invalid configs, split specs, or label registries."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class CheckpointError(ValueError):
    """Raised for corrupt, truncated, or mismatched checkpoint files."""
