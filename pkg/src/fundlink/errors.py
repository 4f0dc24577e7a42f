"""Exception types shared across the package.

Everything derives from FundlinkError so the CLI can map any pipeline
failure to a single data-error exit code.
"""


class FundlinkError(Exception):
    """Base class for all fundlink errors."""


class MalformedDocument(FundlinkError):
    """HTML input contains no recognizable body content."""


class EmptyIndex(FundlinkError):
    """A retrieval index was built from, or queried with, zero chunks."""


class ScorerUnavailable(FundlinkError):
    """An external dense-scorer or re-ranker port failed."""


class DomainError(FundlinkError):
    """A numeric argument fell outside its documented domain."""


class MalformedResponse(FundlinkError):
    """A completion response contained no JSON object with the expected key."""


class TransportError(FundlinkError):
    """A completion port failed at the transport level; retryable."""


class CompletionFailure(FundlinkError):
    """A completion port failed after the configured retries."""


class MissingPrediction(FundlinkError):
    """Gold (doc_id, field) pairs without a matching prediction."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        super().__init__(f"missing predictions for {len(self.pairs)} gold pairs: "
                         + ", ".join(f"({d}, {f})" for d, f in self.pairs[:10]))


class MissingDocument(FundlinkError):
    """Error classification needs a document that was not supplied."""


class AmbiguousMatch(FundlinkError):
    """An exact-identifier link matched more than one target record."""

    def __init__(self, source_id, target_ids):
        self.source_id = source_id
        self.target_ids = list(target_ids)
        super().__init__(f"{source_id} matches multiple targets: {', '.join(self.target_ids)}")


class UnresolvedMeeting(FundlinkError):
    """An application's meeting_ref does not resolve to a known meeting."""


class SchemaViolation(FundlinkError):
    """An ingestion record does not conform to its documented schema."""


class IoFailure(FundlinkError):
    """A file export or import failed at the OS level."""
