"""Exception types shared across the package."""


class SrpTrackError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateDirection(SrpTrackError):
    """A direction vector is too close to zero to define a DOA."""


class OutOfRoom(SrpTrackError):
    """A source or microphone position lies outside the room."""


class AllSilent(SrpTrackError):
    """Every frame of a signal is marked silent."""


class TooShort(SrpTrackError):
    """A signal is shorter than one analysis window."""


class LagRangeTooSmall(SrpTrackError):
    """The stored GCC lag range does not cover the delay table."""


class ShapeError(SrpTrackError):
    """Tensor or layer shapes are inconsistent."""


class FormatError(SrpTrackError):
    """A file does not match the expected on-disk format."""


class EmptySelection(SrpTrackError):
    """A metric was requested over an empty frame selection."""


class NonPhysicalT60Warning(UserWarning):
    """Requested T60 implies an absorption coefficient >= 1."""
