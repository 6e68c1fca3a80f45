"""Exception types raised across the package."""


class AsiftError(Exception):
    """Base class for all package errors."""


class ImageTooSmallError(AsiftError):
    pass


class SingularMapError(AsiftError):
    pass


class DimensionMismatchError(AsiftError):
    pass


class ImageFormatError(AsiftError):
    pass


class ModelFormatError(AsiftError):
    pass


class NoKeypointsError(AsiftError):
    """Training produced an empty descriptor set."""


class NoObjectSeedError(AsiftError):
    """No region received enough matched keypoints to be labeled object."""


class InvariantError(AsiftError):
    """An internal consistency check failed."""
