"""Exception hierarchy shared by every CAD module."""


class CADError(Exception):
    """Base class for all errors raised by the package."""


class ShapeMismatchError(CADError, ValueError):
    pass


class DimensionMismatchError(ShapeMismatchError):
    """Image dimensions are incompatible with the codec's downsampling factor."""


class ModelNotInitializedError(CADError, RuntimeError):
    """Entropy model tables have not been built (call ``freeze()``)."""


class SymbolOutOfRangeError(CADError, ValueError):
    """A latent value exceeds even the escape-coded raw range."""


class CorruptStreamError(CADError, ValueError):
    pass


class ModelMismatchError(CADError, ValueError):
    """Bitstream header refers to a different set of codec weights."""


class SingularHomographyError(CADError, ValueError):
    pass


class MissingCheckpointError(CADError, FileNotFoundError):
    pass


class TrainingDivergedError(CADError, RuntimeError):
    pass


class DuplicateKeyError(CADError, KeyError):
    pass


class KeyNotFoundError(CADError, KeyError):
    pass


class StorageFullError(CADError, OSError):
    pass
