"""Exception types shared across the package."""


class OV3DSimError(Exception):
    """Base class for all package-specific errors."""


class BehindCameraError(OV3DSimError):
    """A 3D box has at least one corner at non-positive camera depth."""


class EmptyObjectError(OV3DSimError):
    """A box extraction produced zero points."""


class ConfigurationError(OV3DSimError):
    """A required piece of configuration (e.g. a camera) is missing or invalid."""


class UnknownCategoryError(OV3DSimError):
    """A category name is not part of the active vocabulary."""
