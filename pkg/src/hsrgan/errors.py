"""Exception types shared across the package."""


class HsrganError(Exception):
    """Base class for package errors."""


class FactorRangeError(HsrganError, ValueError):
    """A generative factor fell outside the normalized [-1, 1] range."""


class ArchiveError(HsrganError, IOError):
    """Dataset archive could not be written or read."""


class ConfigError(HsrganError, ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(ConfigError):
    """A config document contains unknown keys or fails validation."""


class ArtifactMissingError(HsrganError, FileNotFoundError):
    """A required input artifact (dataset, checkpoint, manifest) is absent."""


class HashMismatchError(HsrganError, ValueError):
    """A stored artifact references a different checkpoint than supplied."""


class ExtractorTrainingError(HsrganError, RuntimeError):
    """Feature extractor failed to reach its validation bar within budget."""


class ScorerTrainingError(HsrganError, RuntimeError):
    """Attribute scorer failed to reach its validation bar within budget."""


class TrainingDivergedError(HsrganError, RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class MetricError(HsrganError, ValueError):
    """A metric was called with inputs violating its preconditions."""


class OutputExistsError(HsrganError, FileExistsError):
    """Refusing to overwrite an existing output (pass --overwrite)."""


class LockHeldError(HsrganError, RuntimeError):
    """Another process holds the run-directory lock."""


class ProjectionError(HsrganError, RuntimeError):
    """Latent projection diverged where a downstream step required success."""
