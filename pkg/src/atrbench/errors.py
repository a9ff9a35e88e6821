"""Shared exception types.

Every error raised by this package derives from BenchError so callers
(and the CLI) can distinguish data/contract problems from genuine I/O
failures: BenchError maps to exit code 2, OSError to exit code 3.
"""


class BenchError(Exception):
    """Base class for all validation and contract errors."""


class FormatError(BenchError):
    """A binary or text artifact does not match its documented layout."""


class ManifestError(BenchError):
    """A dataset manifest violates a structural invariant."""


class ConfigError(BenchError):
    """A run configuration is missing keys or contains bad values."""
