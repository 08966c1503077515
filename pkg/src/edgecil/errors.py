"""Exception hierarchy shared by all modules."""


class EdgeCILError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EdgeCILError, ValueError):
    pass


class BatchTooSmallError(EdgeCILError, ValueError):
    pass


class InputError(EdgeCILError, ValueError):
    pass


class ProtocolError(EdgeCILError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NonFiniteGradientError(EdgeCILError, FloatingPointError):
    pass


class ConfigError(EdgeCILError, ValueError):
    pass


class PairError(EdgeCILError, ValueError):
    pass


class SupportError(EdgeCILError, ValueError):
    pass


class DataError(EdgeCILError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class BundleError(EdgeCILError):
    pass


class BundleVersionError(BundleError):
    pass


class BundleChecksumError(BundleError):
    pass


class BundleShapeError(BundleError):
    pass
