"""Exception types shared across the package."""


class TreeMTLError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TreeMTLError):
    """Invalid configuration value or run-config document."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ManifestError(TreeMTLError):
    """Base class for manifest ingestion failures."""


class MissingImageError(ManifestError):
    """A manifest row points at a file that does not exist."""


class UnknownTaskError(ManifestError):
    """A manifest row carries a task tag other than 'fatigue' or 'face'."""


class LabelDensityError(ManifestError):
    """Face identity ids are not dense in [0, N), or fatigue labels are not binary."""


class CheckpointError(TreeMTLError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointFingerprintError(CheckpointError):
    """Stored architecture fingerprint does not match the stored config."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends before all declared records are present."""


class UndefinedMetricError(TreeMTLError):
    """Metric is undefined for the given inputs (e.g. single-class ROC)."""


class TrainingDivergedError(TreeMTLError):
    """A loss went non-finite during training.

    Carries a diagnostic snapshot so the caller can dump state before exiting.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
