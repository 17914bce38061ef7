"""Exception types raised across the package."""


class HandliftError(Exception):
    pass


class ShapeError(HandliftError, ValueError):
    """An array argument violates an operation's shape contract."""


class TapeError(HandliftError, RuntimeError):
    pass


class NondeterministicLossError(HandliftError, RuntimeError):
    pass


class NonFiniteError(HandliftError, FloatingPointError):
    def __init__(self, what, name):
        super().__init__(f"non-finite {what} in {name!r}")
        self.name = name


class BehindCameraError(HandliftError, ValueError):
    pass


class InsufficientViewsError(HandliftError, ValueError):
    pass


class DegenerateGeometryError(HandliftError, ValueError):
    pass


class EmptyHeatmapError(HandliftError, ValueError):
    pass


class FormatError(HandliftError, IOError):
    """Bad magic, version mismatch or truncated container."""


class ChecksumError(FormatError):
    pass


class ConfigError(HandliftError, ValueError):
    pass
