"""Exception types mapped to CLI exit codes by fgs.cli."""


class FgsError(Exception):
    """Base class for all package-specific errors."""


class DatasetError(FgsError):
    """Dataset missing, malformed, or empty after association. Exit code 2."""


class TrackingDivergence(FgsError):
    """GICP lost the map. Carries the last accepted pose. Exit code 3."""

    def __init__(self, message, pose=None):
        super().__init__(message)
        self.pose = pose


class NumericalError(FgsError):
    """Non-finite cost or loss encountered. Exit code 4."""


class InsufficientData(FgsError):
    """Fewer samples than an operation needs (valid pixels, pose pairs, ...)."""
