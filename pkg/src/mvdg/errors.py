"""Exception and warning types shared across the package.

Every failure mode raised by the library derives from :class:`MvdgError`,
so callers (and the CLI) can distinguish library failures from genuine
bugs. I/O failures use the built-in ``OSError`` family.
"""


class MvdgError(Exception):
    """Base class for all library errors."""


# --- geometry ---------------------------------------------------------------

class EmptyCloudError(MvdgError):
    """A point cloud with zero points was supplied."""


class BadKError(MvdgError):
    """Neighbor count outside [1, M] for a nearest-neighbor query."""


class DegenerateCloudWarning(UserWarning):
    """All points coincide (or are equidistant); the result is a defined fallback."""


# --- augmentation -----------------------------------------------------------

class TooFewPointsError(MvdgError):
    """A transform would leave fewer than the minimum surviving point count."""


# --- projection -------------------------------------------------------------

class CloudOutOfSlabError(MvdgError):
    """A point falls outside the [-1, 1] slab along some view basis vector."""


class WrongViewCountError(MvdgError):
    """An operation requiring a fixed view count received a different one."""


# --- tensors and layers -----------------------------------------------------

class ShapeMismatchError(MvdgError):
    """Operand shapes are incompatible; message carries expected vs actual."""


class BatchTooSmallError(MvdgError):
    """Batch normalization in training mode needs a batch of at least 2."""


class BadTargetError(MvdgError):
    """A classification target lies outside [0, num_classes)."""


class BadConfigError(MvdgError):
    """A model or backbone configuration violates a structural constraint."""


class BadScaleError(MvdgError):
    """A strip-pool scale does not divide the feature-map height."""


class BadWeightsError(MvdgError):
    """Loss weights are negative or all zero."""


# --- metrics ----------------------------------------------------------------

class LengthMismatchError(MvdgError):
    """Prediction and truth lists have different lengths."""


class BadClassIdError(MvdgError):
    """A class id lies outside [0, num_classes)."""


class EmptyMatrixError(MvdgError):
    """The utilization profiler received an empty feature matrix."""


# --- file formats -----------------------------------------------------------

class ParseError(MvdgError):
    """Malformed text or container content; message carries line/byte offset."""


class BadMagicError(ParseError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFileError(ParseError):
    """A binary file ends before its declared payload."""


class BadRankError(ParseError):
    """A tensor file declares an unsupported rank."""


class SizeOverflowError(ParseError):
    """Declared dimensions overflow the 32-bit size arithmetic guard."""


class ConfigMismatchError(MvdgError):
    """A checkpoint's configuration differs from the destination model's."""


# --- cli --------------------------------------------------------------------

class UsageError(MvdgError):
    """Bad command-line arguments; maps to exit code 1."""
