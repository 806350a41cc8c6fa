"""Exception types shared across the harness."""


class FsvlmError(Exception):
    """Base class for all harness errors."""


class ConfigurationError(FsvlmError):
    """A config value is malformed or out of range."""


class ValidationError(FsvlmError):
    """An input artifact (manifest, annotation file, embedding batch) violated
    one of its invariants."""


class AnnotationOutOfBoundsError(ValidationError):
    """Annotation bbox does not lie inside its slide raster."""


class InsufficientDataError(FsvlmError):
    """A per-class training pool is too small for the requested superset."""


class BackboneUnavailableError(FsvlmError):
    """Backbone weights or loader code are not available in this environment."""


class TrainingDivergedError(FsvlmError):
    """Training produced a non-finite loss."""


class ReportError(FsvlmError):
    """Report rendering could not proceed (e.g. empty record set)."""
