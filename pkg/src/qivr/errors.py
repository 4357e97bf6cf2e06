"""Exception types shared across the package."""


class QivrError(Exception):
    """Base class for all qivr errors."""


class ConfigError(QivrError):
    """Invalid parameter combination; maps to CLI exit code 2."""


class DimensionMismatch(QivrError):
    pass


class InsufficientData(QivrError):
    pass


class EmptyInputError(QivrError):
    pass


class BucketRangeError(QivrError):
    pass


class FingerprintMismatch(QivrError):
    """Query-time models differ from the ones the index was built with."""


class FormatError(QivrError):
    """Corrupt or unrecognized file content."""
