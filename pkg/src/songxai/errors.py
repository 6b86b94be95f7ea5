"""Exception types shared across the package."""


class SongXaiError(Exception):
    """Base class for package errors."""


class DataError(SongXaiError, ValueError):
    """Input data is missing, malformed or inconsistent."""


class NumericError(SongXaiError, FloatingPointError):
    """A computation produced NaN or Inf."""
