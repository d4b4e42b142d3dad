"""Exception types shared across the package."""


class QipfotError(Exception):
    """Base class for all package-specific errors."""


class DegenerateDataError(QipfotError):
    """Input data has no usable spread (constant samples, zero variance, ...)."""


class DimensionMismatchError(QipfotError):
    """Array shapes or dimensions are inconsistent."""


class OrderTooLargeError(QipfotError):
    """Requested Hermite order exceeds the supported range."""


class UnknownLabelError(QipfotError):
    """A cloud label does not belong to the configured moment order set."""
