"""Exception hierarchy shared across the package."""


class StegoFPError(Exception):
    """Base class for all package errors."""


class ConfigError(StegoFPError):
    """Invalid or inconsistent configuration."""


class FormatError(StegoFPError):
    """Malformed input data (wrong layout, wrong shape, truncated record)."""


class CorruptionError(StegoFPError):
    """Stored artifact failed its integrity check."""


class VersionError(StegoFPError):
    """Stored artifact has an incompatible or tampered header."""


class TrainingError(StegoFPError):
    """Optimization produced a non-finite loss or violated a contract."""


class IncompatibleOracleError(StegoFPError):
    """Suspect oracle's embedding width does not match the fingerprint."""


class CalibrationError(StegoFPError):
    """Threshold calibration failed: the fingerprint does not separate."""
