"""
Exception hierarchy for codedinfer.

Value/shape problems also derive from ValueError and I/O problems from OSError,
so callers that only know the builtin types keep working.
"""

from typing import Iterable, Optional, Sequence


class CdcError(Exception):
    """Base class for all codedinfer errors."""


class DimensionMismatch(CdcError, ValueError):
    """Operand dimensions are incompatible (gemm inner dims, bias length)."""


class InvalidGeometry(CdcError, ValueError):
    """Convolution or pooling geometry produces no valid output."""


class ShapeMismatch(CdcError, ValueError):
    """A tensor does not have the shape a layer, task or plan expects."""

    def __init__(self, message: str, layer_id: Optional[int] = None):
        super().__init__(message)
        self.layer_id = layer_id


class ParseError(CdcError, ValueError):
    """A JSON document or CLI spec string could not be parsed."""


class FormatVersionError(CdcError, ValueError):
    """Binary file carries an unknown magic or version."""


class ChecksumError(CdcError, ValueError):
    """CRC mismatch or truncated record."""


class IncompatibleMethod(CdcError, ValueError):
    """Split method does not apply to the layer kind."""


class TooManyDevices(CdcError, ValueError):
    """More devices than elements along the split axis."""


class UnknownDevice(CdcError, KeyError):
    """Device index not part of the plan."""


class MissingPartial(CdcError, ValueError):
    """Merge was called without a partial for every device."""

    def __init__(self, missing: Iterable[int]):
        self.missing = sorted(missing)
        super().__init__(f"missing partials from devices {self.missing}")


class UnsuitableMethod(CdcError, ValueError):
    """Coding requested for a split method that has no shared factor."""

    def __init__(self, method, row: str):
        self.method = method
        self.row = row
        super().__init__(f"{method.value} is not suitable for coded computing ({row})")


class TooManyMissing(CdcError, ValueError):
    """More partials are missing than a single-failure decode can recover."""


class NothingMissing(CdcError, ValueError):
    """Decode requested although every partial arrived; merge directly."""


class ExplosionGuard(CdcError, ValueError):
    """Exhaustive enumeration would exceed the configured pattern cap."""

    def __init__(self, patterns: int, cap: int):
        self.patterns = patterns
        self.cap = cap
        super().__init__(f"{patterns} failure patterns exceed the cap of {cap}")


class StageTimeout(CdcError):
    """A stage could not complete before its deadline."""

    def __init__(self, stage: int, missing: Sequence[int], at_ms: float):
        self.stage = stage
        self.missing = list(missing)
        self.at_ms = at_ms
        super().__init__(
            f"stage {stage} timed out at {at_ms:.3f} ms waiting for devices {self.missing}"
        )


class AllocationInvalid(CdcError, ValueError):
    """Allocation file violates coverage, roster or coding rules."""


class NoFeasibleAllocation(CdcError, LookupError):
    """No catalog entry can run on the alive devices."""


class ConnectionClosed(CdcError, OSError):
    """TCP peer closed the stream mid-frame."""


class EmptySamples(CdcError, ValueError):
    """Statistic requested over an empty sample set."""


class IoError(CdcError, OSError):
    """File could not be read or written."""


class OrderStatisticViolation(CdcError):
    """A paired campaign run finished later with more devices than with fewer."""

    def __init__(self, n: int, request_id: int, detail: str):
        self.n = n
        self.request_id = request_id
        super().__init__(f"n={n} request {request_id}: {detail}")
