"""Exception hierarchy shared by every stage of the pipeline."""


class AptMclError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(AptMclError):
    """A line of the event log is not valid JSON or misses required fields."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SchemaError(AptMclError):
    """An event names a node type or (type pair, action) outside the catalogue."""


class IntegrityError(AptMclError):
    """The same entity key was observed with two different node types."""


class DimensionError(AptMclError, ValueError):
    """Array shapes do not match what a model was built for."""


class DivergenceError(AptMclError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float) -> None:
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


class DegenerateDataError(AptMclError, ValueError):
    """Input data carries no usable variation (e.g. all rows identical)."""


class ColdStartError(AptMclError):
    """Neither unsupervised detector flagged any sample above batch_thres."""


class ClassStarvationError(AptMclError):
    """A supervised model was asked to train on a single class."""


class NotFittedError(AptMclError):
    """A model was used before being trained."""


class ArtifactError(AptMclError):
    """A persisted artifact is missing, malformed or from another config."""


class ConfigError(AptMclError, ValueError):
    """Invalid or unreadable pipeline configuration."""
