"""Protocol-agnostic frame and message types plus the virtual-bus wire format."""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

Number = Union[int, float]

_HEX_RE = re.compile(r"^(?:0[xX])?([0-9a-fA-F]{1,8})$")
_HEADER = struct.Struct(">BIB")
HEADER_SIZE = _HEADER.size
FLAG_EXTENDED = 0x01


class FormatError(ValueError):
    """Raised for malformed identifiers or wire bytes."""


class Direction(enum.Enum):
    CAR_TO_DONGLE = "car_to_dongle"
    DONGLE_TO_CAR = "dongle_to_car"

    @property
    def opposite(self) -> "Direction":
        if self is Direction.CAR_TO_DONGLE:
            return Direction.DONGLE_TO_CAR
        return Direction.CAR_TO_DONGLE


def canonicalize_identifier(raw: str) -> str:
    """Normalize a hex identifier: uppercase, no prefix, leading zeros
    stripped, padded to at least two digits.

    >>> canonicalize_identifier("0x0c")
    '0C'
    >>> canonicalize_identifier("0x7E8")
    '7E8'
    """
    if not isinstance(raw, str):
        raise FormatError(f"identifier must be a string, got {raw!r}")
    m = _HEX_RE.match(raw.strip())
    if m is None:
        raise FormatError(f"not a hex identifier: {raw!r}")
    digits = m.group(1).upper().lstrip("0")
    return digits.rjust(2, "0")


def identifier_of(arbitration_id: int) -> str:
    return canonicalize_identifier(format(arbitration_id, "X"))


@dataclass(frozen=True)
class RawFrame:
    arbitration_id: int
    data: bytes = b""
    extended: bool = False
    ingress_ts: int = 0
    direction: Direction = Direction.CAR_TO_DONGLE

    def __post_init__(self) -> None:
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > 8:
            raise FormatError(f"dlc {len(self.data)} exceeds 8")
        limit = 1 << 29 if self.extended else 1 << 11
        if not 0 <= self.arbitration_id < limit:
            raise FormatError(
                f"arbitration id {self.arbitration_id:#x} out of range "
                f"for {'extended' if self.extended else 'standard'} frame"
            )

    @property
    def dlc(self) -> int:
        return len(self.data)

    def same_content(self, other: "RawFrame") -> bool:
        """Equality ignoring the ingress timestamp."""
        return (
            self.arbitration_id == other.arbitration_id
            and self.extended == other.extended
            and self.data == other.data
            and self.direction == other.direction
        )

    def to_wire(self) -> bytes:
        flags = FLAG_EXTENDED if self.extended else 0
        return _HEADER.pack(flags, self.arbitration_id, len(self.data)) + self.data


def parse_header(header: bytes) -> tuple[bool, int, int]:
    flags, arb_id, dlc = _HEADER.unpack(header)
    if flags & ~FLAG_EXTENDED:
        raise FormatError(f"reserved flag bits set: {flags:#04x}")
    if dlc > 8:
        raise FormatError(f"dlc {dlc} exceeds 8")
    return bool(flags & FLAG_EXTENDED), arb_id, dlc


def from_wire(
    buf: bytes, direction: Direction = Direction.CAR_TO_DONGLE, ingress_ts: int = 0
) -> RawFrame:
    """Parse exactly one frame from ``buf``."""
    frame, used = _parse_one(buf, 0, direction, ingress_ts)
    if used != len(buf):
        raise FormatError(f"{len(buf) - used} trailing bytes after frame")
    return frame


def _parse_one(
    buf: bytes, pos: int, direction: Direction, ingress_ts: int
) -> tuple[RawFrame, int]:
    if len(buf) - pos < HEADER_SIZE:
        raise FormatError(f"truncated header at offset {pos}")
    extended, arb_id, dlc = parse_header(buf[pos : pos + HEADER_SIZE])
    start = pos + HEADER_SIZE
    if len(buf) - start < dlc:
        raise FormatError(f"truncated payload at offset {pos}")
    frame = RawFrame(arb_id, bytes(buf[start : start + dlc]), extended, ingress_ts, direction)
    return frame, start + dlc


def iter_wire(buf: bytes, direction: Direction = Direction.CAR_TO_DONGLE) -> Iterator[RawFrame]:
    """Iterate over a byte-concatenated frame stream."""
    pos = 0
    while pos < len(buf):
        frame, pos = _parse_one(buf, pos, direction, 0)
        yield frame


@dataclass(frozen=True)
class DecodedMessage:
    """A frame lifted to (identifier, value).

    ``kind`` is one of ``request``, ``response``, ``signal`` or ``raw``;
    requests carry no value window and cannot be rewritten.
    """

    frame: RawFrame
    identifier: str
    value: Number
    unit: str = ""
    codec: str = "raw"
    kind: str = "raw"

    @property
    def has_value(self) -> bool:
        return self.kind != "request"

    @property
    def text(self) -> str:
        return render_text(self.identifier, self.value, self.unit)


def render_text(identifier: str, value: Number, unit: str = "") -> str:
    text = f"{identifier}={value!r} {unit}".rstrip()
    return text[:255]


class Action(enum.Enum):
    FORWARD = "forward"
    MODIFIED = "modified"
    DROP = "drop"


@dataclass(frozen=True)
class Verdict:
    action: Action
    new_frame: Optional[RawFrame] = None
    new_value: Optional[Number] = None
    release_after: Optional[int] = None
    behaviour_index: int = -1
    error: str = ""

    def __post_init__(self) -> None:
        if self.action is Action.MODIFIED and self.new_frame is None:
            raise ValueError("modified verdict needs a new frame")
        if self.action is not Action.MODIFIED and self.new_frame is not None:
            raise ValueError(f"{self.action.value} verdict cannot carry a new frame")
        if self.release_after is not None:
            if self.action is Action.DROP:
                raise ValueError("drop verdict cannot be delayed")
            if self.release_after < 0:
                raise ValueError("release_after must be non-negative")

    @classmethod
    def forward(cls, release_after: Optional[int] = None, behaviour_index: int = -1) -> "Verdict":
        return cls(Action.FORWARD, release_after=release_after, behaviour_index=behaviour_index)

    @classmethod
    def drop(cls, behaviour_index: int = -1, error: str = "") -> "Verdict":
        return cls(Action.DROP, behaviour_index=behaviour_index, error=error)

    @classmethod
    def modified(
        cls,
        new_frame: RawFrame,
        new_value: Number,
        release_after: Optional[int] = None,
        behaviour_index: int = -1,
    ) -> "Verdict":
        return cls(Action.MODIFIED, new_frame, new_value, release_after, behaviour_index)
