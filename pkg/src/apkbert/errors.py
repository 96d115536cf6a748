"""Exception hierarchy.

Every error raised by the package derives from ``ApkBertError`` so the CLI can
report it as a single ``error: <Name>: <message>`` line.
"""


class ApkBertError(Exception):
    """Base class for all package errors."""


# apk ingest
class TruncatedArchive(ApkBertError):
    pass


class BadCentralDirectory(ApkBertError):
    pass


class UnsupportedCompression(ApkBertError):
    pass


class ManifestMissing(ApkBertError):
    pass


class DecompressionFailure(ApkBertError):
    pass


class CorruptStringPool(ApkBertError):
    pass


class NotManifestData(ApkBertError):
    pass


# dataset
class DatasetError(ApkBertError):
    """Row-level dataset problem; ``row`` is the 1-based CSV line number."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class MissingColumn(DatasetError):
    pass


class BadLabel(DatasetError):
    pass


class UnknownCategory(DatasetError):
    pass


class CategoryOnBenign(DatasetError):
    pass


class EmptyCorpus(ApkBertError):
    pass


class VocabFormatError(ApkBertError):
    pass


# numerics / model
class ShapeMismatch(ApkBertError):
    pass


class NonScalarRoot(ApkBertError):
    pass


class MissingGradient(ApkBertError):
    pass


class IdOutOfRange(ApkBertError):
    pass


class BadConfig(ApkBertError):
    pass


class MlmHeadAbsent(ApkBertError):
    pass


class CheckpointError(ApkBertError):
    pass


# training / metrics
class EmptyDataset(ApkBertError):
    pass


class MissingCategory(ApkBertError):
    pass


class EmptyCounts(ApkBertError):
    pass


class LengthMismatch(ApkBertError):
    pass


class LabelOutOfRange(ApkBertError):
    pass


# corpus clients
class ClientError(ApkBertError):
    pass


class AuthFailure(ClientError):
    pass


class RateLimited(ClientError):
    pass


class FixtureMissing(ClientError):
    pass


class NotFound(ClientError):
    pass


class HashMismatch(ClientError):
    pass


class UnknownHash(ClientError):
    pass


class UnmappableCategory(ClientError):
    def __init__(self, family):
        super().__init__(f"no category alias matches family {family!r}")
        self.family = family


# non-fatal conditions, emitted through ``warnings``
class StratumTooSmall(UserWarning):
    pass


class UnknownChunkType(UserWarning):
    pass
