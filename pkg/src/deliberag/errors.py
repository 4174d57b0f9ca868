"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class DeliberagError(Exception):
    """Base class for all library errors."""


# corpus
class CorpusError(DeliberagError):
    pass


class ManifestNotFound(CorpusError):
    pass


class ManifestParseError(CorpusError):
    pass


class DuplicateDocId(CorpusError):
    pass


class UnknownCategory(CorpusError):
    pass


class UnreadableDocument(CorpusError):
    pass


class EmptyDocument(CorpusError):
    pass


class MissingCategory(CorpusError):
    pass


class CorpusFileError(CorpusError):
    """Persisted corpus/index file is malformed or has the wrong schema version."""


# backend
class BackendError(DeliberagError):
    pass


class EmptyInput(BackendError):
    pass


class BackendUnreachable(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


class DimensionMismatch(DeliberagError):
    pass


# index
class ZeroVector(DeliberagError):
    pass


class EmptyCorpus(DeliberagError):
    pass


# agents / discussion
class ScopeViolation(DeliberagError):
    """A retrieved chunk lies outside the requesting role's categories."""


class ConfigError(DeliberagError):
    pass


class OutOfRange(DeliberagError):
    pass


class DiscussionError(DeliberagError):
    """A round failed; carries the failing round/role and any partial transcript."""

    def __init__(self, round_index: int, role_id: str, cause: BaseException, partial=None):
        super().__init__(f"round {round_index}, role {role_id}: {cause}")
        self.round_index = round_index
        self.role_id = role_id
        self.cause = cause
        self.partial = partial


# metrics / report
class EmptyTranscript(DeliberagError):
    pass


class EmptyDecisionList(DeliberagError):
    pass


class EmptyInputList(DeliberagError):
    pass


class EmptyRelevantSet(DeliberagError):
    pass


class SchemaError(DeliberagError):
    """A persisted transcript/metrics/report file does not match schema_version 1."""


class TranscriptMetricsMismatch(DeliberagError):
    pass
