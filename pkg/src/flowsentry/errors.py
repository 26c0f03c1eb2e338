"""Exception taxonomy.

Three top-level categories drive CLI exit codes: configuration errors
(exit 2), data errors (exit 3) and remote-service errors (exit 4).
Pipeline runners may attach a ``stage`` attribute before re-raising so
callers can see which step failed.
"""


class FlowSentryError(Exception):
    """Base class for all errors raised by this package."""

    stage: str | None = None


class ConfigurationError(FlowSentryError):
    """Invalid configuration or incompatible options."""


class DataError(FlowSentryError):
    """Malformed, missing or insufficient input data."""


class RemoteServiceError(FlowSentryError):
    """Failure talking to a remote chat-completion endpoint."""


# --- ingest ---------------------------------------------------------------

class VersionMismatch(DataError):
    """Datagram version field is not NetFlow v5."""


class TruncatedDatagram(DataError):
    """Datagram length inconsistent with its header count."""


class TooManyRecords(ConfigurationError):
    """More than 30 flow records requested for one v5 datagram."""


class SchemaMismatch(DataError):
    """Flow CSV is missing a required column."""


class RowParseError(DataError):
    """A CSV row could not be parsed; carries the 1-based row number."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


# --- synth ----------------------------------------------------------------

class EmptyVectorList(ConfigurationError):
    """Attack flows requested but no attack-vector templates given."""


# --- sequencer ------------------------------------------------------------

class EmptyWindow(DataError):
    """Sequentialization of an empty flow window."""


# --- model ----------------------------------------------------------------

class EmptyFit(DataError):
    """Normalizer fit over an empty feature list."""


class DimensionMismatch(ConfigurationError):
    """Array shape incompatible with the configured dimensions."""


class SequenceTooLong(ConfigurationError):
    """Sequence length exceeds the encoder's positional-embedding capacity."""


class AllPositionsMasked(DataError):
    """A training batch has no valid labeled position to compute loss over."""


class NoLabeledData(DataError):
    """Training requested but the dataset carries no labeled flows."""


# --- predictor ------------------------------------------------------------

class InsufficientDistinctPoints(DataError):
    """Fewer distinct feature vectors than requested codebook entries."""


class MaliciousInTrainingSet(DataError):
    """Benign-only training set contains a Malicious flow."""


class EmptyValidation(DataError):
    """Threshold calibration over an empty validation set."""


# --- promptcls ------------------------------------------------------------

class InsufficientClassExamples(DataError):
    """Dataset too small to draw the requested stratified few-shot set."""


class EmptyQuery(ConfigurationError):
    """Prompt build requested with no query flows."""


class MalformedPrompt(DataError):
    """Stub classifier could not find any query flow line in the prompt."""


class Timeout(RemoteServiceError):
    """Remote request exceeded the configured timeout with no retry budget."""


class HttpError(RemoteServiceError):
    """Remote endpoint answered with a non-retryable HTTP status."""

    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}" + (f": {message}" if message else ""))
        self.status = status


class RetriesExhausted(RemoteServiceError):
    """All retry attempts against the remote endpoint failed."""


# --- harness --------------------------------------------------------------

class InsufficientFlows(DataError):
    """Not enough flows of a class/vector to honor the requested split."""


class LengthMismatch(ConfigurationError):
    """Paired label/prediction/score lists have different lengths."""


class FormatVersionMismatch(DataError):
    """Checkpoint file declares an unsupported format version."""


class CorruptBlob(DataError):
    """Checkpoint parameter blob does not match its declared element count."""
