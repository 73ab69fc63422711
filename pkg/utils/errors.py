"""Exception hierarchy shared by the store, encoders, triplet builder and trainer."""


class DenoiseError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(DenoiseError):
    """A configuration value or argument is outside its allowed range."""


class DimensionMismatchError(DenoiseError):
    """Two vectors or arrays that must share a dimension do not."""


class ZeroVectorError(DenoiseError):
    """A vector with zero norm reached a normalized computation."""


# Store
class StoreError(DenoiseError):
    """Base class for embedding store failures."""


class DuplicateIdError(StoreError):
    pass


class BadMagicError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class TruncatedStoreError(StoreError):
    pass


class NonFiniteValueError(StoreError):
    pass


class UnresolvedImageError(StoreError):
    """A caption references an image id that is not in the store."""


# Encoders / prompts
class EncoderError(DenoiseError):
    pass


class UnknownTokenError(EncoderError):
    pass


class MissingSlotError(EncoderError):
    pass


class TemplateError(EncoderError):
    """A prompt template was called with the wrong arity or an empty payload."""


# Triplets / training / evaluation
class CropGeometryError(DenoiseError):
    """No crop box satisfies the size and center-exclusion constraints."""


class BatchSizeError(DenoiseError):
    pass


class NonFiniteGradientError(DenoiseError):
    pass


class TrainingAbortedError(DenoiseError):
    pass


class EmptyTaskSetError(DenoiseError):
    pass


class WorldLayoutError(DenoiseError):
    pass


class ExportError(DenoiseError):
    pass
