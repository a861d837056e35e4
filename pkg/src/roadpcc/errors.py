"""Exception hierarchy for the toolkit.

Everything raised on bad input derives from :class:`PccError` so callers
(the CLI in particular) can separate data errors from programming errors.
"""

from __future__ import annotations


class PccError(Exception):
    """Base class for all toolkit errors."""


class EmptyCloud(PccError, ValueError):
    pass


class InvalidPoint(PccError, ValueError):
    pass


class DegenerateBox(PccError, ValueError):
    pass


class InvalidSensor(PccError, ValueError):
    pass


class SensorMismatch(PccError, ValueError):
    pass


class PointOutOfRange(PccError, ValueError):
    pass


class NonPositiveVoxelSize(PccError, ValueError):
    pass


# -- file formats ---------------------------------------------------------

class MalformedHeader(PccError, ValueError):
    pass


class UnsupportedField(PccError, ValueError):
    pass


class CountMismatch(PccError, ValueError):
    pass


class InvalidFrame(PccError, ValueError):
    pass


class BadMagic(PccError, ValueError):
    pass


class CrcMismatch(PccError, ValueError):
    pass


class TruncatedFrame(PccError, ValueError):
    pass


class CorruptPayload(PccError, ValueError):
    pass


class WrongCodec(PccError, ValueError):
    pass


# -- metrics / bench ------------------------------------------------------

class TooFewPoints(PccError, ValueError):
    pass


class ZeroPoints(PccError, ValueError):
    pass


class EmptyList(PccError, ValueError):
    pass


class DegenerateReference(PccError, ValueError):
    pass


class TooFewSettings(PccError, ValueError):
    pass


class LosslessInCurve(PccError, ValueError):
    pass


class EmptyCurve(PccError, ValueError):
    pass


class SweepError(PccError):
    """A codec failed inside a sweep; ``setting`` names the offending setting."""

    def __init__(self, setting: str, cause: Exception) -> None:
        super().__init__(f"setting {setting!r}: {cause}")
        self.setting = setting
        self.cause = cause


# -- streaming ------------------------------------------------------------

class BindFailure(PccError, OSError):
    pass


class ConnectFailure(PccError, OSError):
    pass


class HandshakeFailure(PccError):
    pass
