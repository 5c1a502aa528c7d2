"""Exception hierarchy shared by every stage of the registration engine."""


class RegistrationError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(RegistrationError, ValueError):
    """An input lies outside the domain of an operation (non-finite, non-positive...)."""


class ShapeError(RegistrationError, ValueError):
    """Array shapes or channel counts disagree."""


class BundleError(RegistrationError):
    """A feature bundle on disk is unreadable or inconsistent."""


class ShapeMismatchError(BundleError):
    """Payload bytes do not cover the tensors the manifest declares."""


class ManifestMismatchError(BundleError):
    """Manifest entries contradict each other or the payload."""


class ChecksumError(BundleError):
    """A tensor's bytes do not hash to the recorded checksum."""


class InsufficientCorrespondencesError(RegistrationError):
    """Too few 2D-3D pairs for the requested solver."""


class DegenerateConfigurationError(RegistrationError):
    """Correspondences do not constrain a unique pose (e.g. coplanar points for DLT)."""


class PoseEstimationError(RegistrationError):
    """Robust pose estimation found no hypothesis with enough support."""
