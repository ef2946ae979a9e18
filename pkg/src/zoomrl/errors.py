"""Exception types shared across the package."""


class ZoomRLError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(ZoomRLError):
    """Invalid or inconsistent configuration, detected at command start."""


class NumericalError(ZoomRLError):
    """Non-finite value encountered in policy or optimizer arithmetic."""


class OutOfBoundsError(ZoomRLError):
    """A pixel coordinate fell outside the image it targets."""
