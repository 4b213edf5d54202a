"""Exception types shared across the package.

The CLI maps these onto exit codes: config/shape problems exit 2, broken
files exit 3, and a non-finite loss exits 4.
"""


class SpinetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpinetError):
    """Invalid configuration: unknown keys, bad values, unknown presets."""


class ShapeError(SpinetError):
    """Tensor shape or size-divisibility violations."""


class FormatError(SpinetError):
    """Corrupt or invalid on-disk data (.pan files, manifests, reports)."""


class CheckpointError(SpinetError):
    """Corrupt checkpoint files or checkpoint/model mismatches."""


class NumericError(SpinetError):
    """Non-finite values encountered during optimization."""
