"""Exception types shared across the package.

Everything raised on purpose derives from FlowcastError so callers can catch
one base class at the CLI boundary.
"""


class FlowcastError(Exception):
    pass


# --- capture ingest ---

class MalformedCapture(FlowcastError):
    """Capture file is unreadable: short/bad global header or unsupported link type."""


# --- feature pipeline ---

class EmptyResult(FlowcastError):
    """A filter step removed every column (or there were no rows to work with)."""


class ClassTooSmall(FlowcastError):
    """Stratified splitting needs at least 3 rows of every class."""


class MixedFlows(FlowcastError):
    """An operation that expects a single flow received rows from several."""


# --- tokenizer / text ---

class CorpusEmpty(FlowcastError):
    """Tokenizer training received no non-special bytes."""


class UnknownId(FlowcastError):
    """Token id outside the vocabulary."""


class LineParseError(FlowcastError):
    """A packet line did not match the expected name=value column layout."""


class UnsafeValue(FlowcastError):
    """A field value cannot be serialized unambiguously (embedded space/newline/'=')."""


# --- nn core ---

class ShapeMismatch(FlowcastError):
    pass


class IdOutOfRange(FlowcastError):
    """Token id outside the embedding table."""


class AllMasked(FlowcastError):
    """Loss requested over zero unmasked positions."""


class LabelOutOfRange(FlowcastError):
    """Class id outside [0, num_classes)."""


class CheckpointError(FlowcastError):
    """Checkpoint file is missing, corrupt, or from an unknown format version."""


class ConfigHashMismatch(CheckpointError):
    """Checkpoint was produced under a different configuration."""


# --- sequence models ---

class WindowTooLong(FlowcastError):
    """Token window exceeds the model's position table."""


class MaxTokensExceeded(FlowcastError):
    """Generation hit its token budget before producing a complete line."""


class NothingToMask(FlowcastError):
    """Masked-token objective got a batch with no maskable (non-special) positions."""


class SequenceTooLong(FlowcastError):
    """Encoded pair does not fit the evaluator's position table."""


class InsufficientFlows(FlowcastError):
    """Pair construction needs more/longer flows than were provided."""


# --- metrics ---

class LengthMismatch(FlowcastError):
    pass


class SingleClass(FlowcastError):
    """ROC needs at least one positive and one negative example."""


class IoFailure(FlowcastError):
    """A report or plot file could not be written."""


# --- pipeline / CLI ---

class ConfigError(FlowcastError):
    """Bad or missing configuration (CLI exit code 2)."""


class StageFailure(FlowcastError):
    """A pipeline stage failed; .stage names it (CLI exit code 3)."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class MissingCheckpoint(FlowcastError):
    """Deployment asked for a model that was never trained."""
