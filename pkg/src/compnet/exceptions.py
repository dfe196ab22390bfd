"""Exception hierarchy shared across the package."""


class CompnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CompnetError):
    """Tensor shapes or ranks are incompatible with an operation."""


class TapeError(CompnetError):
    """Gradient bookkeeping misuse (untracked loss, mixed tapes)."""


class ConfigError(CompnetError):
    """A configuration value violates its documented constraints."""


class DataError(CompnetError):
    """Dataset contents violate their invariants (labels, emptiness)."""


class FormatError(CompnetError):
    """An on-disk artifact does not match its declared format."""


class NumericError(CompnetError):
    """A non-finite value appeared where finite arithmetic is required."""


class VariantError(CompnetError):
    """An operation was applied to the wrong model variant."""
