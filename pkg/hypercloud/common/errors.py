"""Exception hierarchy shared by every hypercloud module.

Library code raises these; only the command line turns them into exit codes.
"""

from contextlib import contextmanager


class HypercloudError(Exception):
    """Base error. ``exit_code`` is what the CLI returns for it."""
    exit_code = 1


class DataError(HypercloudError):
    """Malformed input files, shapes or values."""
    exit_code = 3


class NumericError(HypercloudError):
    """A numeric procedure failed to produce a usable result."""
    exit_code = 4


# hypercube
class BadMagic(DataError):
    pass


class DimMismatch(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class NonFinite(DataError):
    pass


class EmptyCube(DataError):
    pass


class IoFailure(DataError):
    pass


class InvalidLabel(DataError):
    pass


class InvalidWavelengths(DataError):
    pass


class TileTooLarge(DataError):
    pass


class BandOutOfRange(DataError):
    pass


class EmptyInput(DataError):
    pass


# bandselect
class TooFewSamples(DataError):
    pass


class NonConvergence(NumericError):
    pass


# nn_core / models
class InputTooShort(DataError):
    pass


class ExtentTooSmall(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class TapeMissing(HypercloudError):
    pass


# pipeline
class TooFewTiles(DataError):
    pass


class ChannelMissing(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


# metrics
class LengthMismatch(DataError):
    pass


class EmptyReport(DataError):
    pass


@contextmanager
def malformed(what: str):
    """Turn missing keys and wrongly typed fields of a parsed document into ``DataError``."""
    try:
        yield
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise DataError(f"malformed {what}: {type(e).__name__} {e}") from e
