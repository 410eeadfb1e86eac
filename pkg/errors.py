# 📄 errors.py
"""Exception hierarchy shared by every pms component.

Each error carries a human-readable ``detail`` (the same attribute name the
HTTP layer uses), so the CLI and the recognizer service can report it as-is.
"""
from typing import Optional


class PmsError(Exception):
    """Base class for all pms errors."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeError(PmsError):
    """An operation received tensors whose shapes do not conform."""

    def __init__(self, op: str, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shown}")
        self.op = op
        self.shapes = shapes


class NumericsError(PmsError):
    """A value is undefined (zero norm, non-finite result, bad epsilon)."""


class ConfigError(PmsError):
    """Configuration failed validation before any compute started."""


class DataError(PmsError):
    """Input data (audio, features, labels, transcripts) is malformed."""


class TrainingAborted(PmsError):
    """A training step produced a non-finite loss."""

    def __init__(self, batch_id: str, detail: str):
        super().__init__(f"batch {batch_id}: {detail}")
        self.batch_id = batch_id


class StageError(PmsError):
    """A pipeline stage failed at runtime."""

    def __init__(self, stage: str, cause: Exception):
        reason = getattr(cause, "detail", None) or str(cause)
        super().__init__(f"stage '{stage}' failed: {reason}")
        self.stage = stage
        self.cause = cause


# Validation-class errors map to exit code 1; everything else to 2.
VALIDATION_ERRORS = (ConfigError, DataError, ShapeError)


def exit_code_for(error: Optional[BaseException]) -> int:
    if error is None:
        return 0
    if isinstance(error, StageError):
        error = error.cause
    return 1 if isinstance(error, VALIDATION_ERRORS) else 2
