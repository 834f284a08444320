"""Exception hierarchy shared by every shifttrace module."""

from __future__ import annotations


class ShiftTraceError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ShiftTraceError, ValueError):
    """Input violates a documented precondition or type invariant."""


# amounts -------------------------------------------------------------------


class AmountError(ValidationError):
    pass


class TooManyDecimals(AmountError):
    pass


class NegativeAmount(AmountError):
    pass


class PrecisionMismatch(AmountError):
    pass


class ZeroReference(AmountError):
    pass


# chain store ---------------------------------------------------------------


class IngestError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(IngestError):
    pass


class OrderingError(IngestError):
    pass


class DanglingInput(IngestError):
    pass


class DoubleSpend(DanglingInput):
    """An input references an output that was already spent."""


class RangeOutOfBounds(ValidationError):
    pass


class UnknownUtxo(ValidationError, KeyError):
    pass


class UnknownChain(ValidationError, KeyError):
    pass


class EmptyChain(ValidationError):
    pass


# feed ----------------------------------------------------------------------


class BackendUnavailable(ShiftTraceError):
    """The shift service (or its stand-in) could not be reached."""


class ArchiveError(ShiftTraceError, OSError):
    pass


# simulator -----------------------------------------------------------------


class ConfigError(ValidationError):
    pass


class UnsupportedVariant(ValidationError):
    pass


class PlantingFailed(ShiftTraceError):
    """The world has no room left to place a pattern with the required margins."""


# matching ------------------------------------------------------------------


class Phase2Unresolvable(ShiftTraceError):
    pass


class MissingRate(ShiftTraceError, LookupError):
    pass


# analysis ------------------------------------------------------------------


class UnknownNode(ValidationError, KeyError):
    pass


class NotAShieldedChain(ValidationError):
    pass


class WrongChainModel(ValidationError):
    pass


class DegenerateCluster(ShiftTraceError):
    pass
