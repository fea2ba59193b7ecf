"""Exception hierarchy shared by all platenet modules."""


class PlatenetError(Exception):
    pass


class ShapeError(PlatenetError, ValueError):
    """Raised when tensor shapes are invalid or incompatible."""


class StateError(PlatenetError, RuntimeError):
    """Raised when a layer is used out of order (e.g. backward before forward)."""


class BuildError(PlatenetError, ValueError):
    """Raised when a layer chain is not shape-consistent with its input size.

    ``layer`` holds the name of the first layer that could not be placed.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class FormatError(PlatenetError, ValueError):
    """Raised for malformed weight files. ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class StructureError(PlatenetError, ValueError):
    """Raised when a loaded model does not match the expected architecture."""


class DatasetError(PlatenetError):
    pass


class TrainingError(PlatenetError, RuntimeError):
    """Raised when training aborts; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None, epoch=None, batch=None):
        super().__init__(message)
        self.history = history
        self.epoch = epoch
        self.batch = batch
