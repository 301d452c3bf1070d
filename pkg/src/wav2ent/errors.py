"""Exception hierarchy shared by every stage of the pipeline."""


class Wav2EntError(Exception):
    """Base class for all errors raised by this package."""


class DataError(Wav2EntError):
    """Bad input data (audio, manifests, corpora). CLI exit code 2."""


class MalformedHeader(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class EmptyInput(DataError):
    pass


class EmptyManifest(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class EmptyTemplateSet(DataError):
    pass


class VocabViolation(DataError):
    pass


class LengthMismatch(DataError):
    pass


class TagVocabMismatch(DataError):
    pass


class IoError(DataError):
    pass


class ShapeMismatch(Wav2EntError, ValueError):
    pass


class InputTooShort(Wav2EntError, ValueError):
    pass


class IndexOutOfRange(Wav2EntError, IndexError):
    pass


class NotScalar(Wav2EntError, ValueError):
    pass


class SequenceTooLong(Wav2EntError, ValueError):
    pass


class TargetTooLong(Wav2EntError, ValueError):
    pass


class InvalidTag(Wav2EntError, ValueError):
    pass


class InsufficientMaskedFrames(Wav2EntError, ValueError):
    pass


class CheckpointError(Wav2EntError):
    """Unreadable, corrupt or incompatible checkpoint. CLI exit code 3."""


class ConfigError(Wav2EntError):
    pass
