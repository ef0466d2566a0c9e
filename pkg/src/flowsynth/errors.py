"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see :mod:`flowsynth.cli`).
"""


class FlowsynthError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowsynthError):
    """Incompatible tensor/volume shapes."""


class ConfigError(FlowsynthError):
    """Malformed or inconsistent run configuration."""


class DataError(FlowsynthError):
    """Dataset, volume-file, or manifest problems."""


class VolumeFormatError(DataError):
    """Malformed VOLF file; ``code`` is one of bad_magic, truncated,
    dim_overflow, bad_version, bad_kind."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class CheckpointError(FlowsynthError):
    """Missing, malformed, or dimensionally incompatible checkpoint."""


class NumericError(FlowsynthError):
    """Non-finite values or other numeric failure during a run."""
