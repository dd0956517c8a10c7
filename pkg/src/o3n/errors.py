"""Exception types shared across the package."""


class O3NError(Exception):
    """Base class for every error raised by this package."""


class MalformedContainer(O3NError):
    pass


class DimensionError(O3NError):
    pass


class ConfigError(O3NError):
    pass


class VideoTooShort(O3NError):
    pass


class ShapeError(O3NError, ValueError):
    pass


class ShapeMismatch(O3NError):
    pass


class LabelOutOfRange(O3NError, ValueError):
    pass


class IoError(O3NError, OSError):
    pass
