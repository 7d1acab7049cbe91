"""CAN binding: DBC-lite signal maps and OBD-II mode 01 single-frame codec.

DBC-lite line format (whitespace separated, ``#`` starts a comment)::

    <identifier-hex> <start_byte> <byte_length> <scale> <offset> <min> <max> <unit>

For OBD-II responses the identifier is the PID and ``start_byte`` indexes the
response data (the bytes after ``[len, 0x41, pid]``).  For any other frame the
identifier is the arbitration ID and ``start_byte`` indexes the payload.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from importlib import resources
from typing import Iterable, Mapping, NamedTuple, Optional, Union

from .model import DecodedMessage, FormatError, Number, RawFrame, canonicalize_identifier, identifier_of

log = logging.getLogger(__name__)

REQUEST_IDS = frozenset({0x7DF, 0x7E0})
RESPONSE_IDS = range(0x7E8, 0x7F0)
RESPONSE_OFFSET = 0x40
OBD_MODE = 0x01
# byte offset of the response data within the payload: [len, mode|0x40, pid, data...]
RESPONSE_DATA_START = 3


class CodecError(ValueError):
    pass


class SignalMapError(CodecError):
    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class DecodeError(CodecError):
    pass


class EncodeError(CodecError):
    pass


def _dec(value: Number) -> Decimal:
    # repr gives the shortest decimal that round-trips the float
    return Decimal(repr(value)) if isinstance(value, float) else Decimal(value)


@dataclass(frozen=True)
class SignalSpec:
    identifier: str
    start_byte: int
    byte_length: int
    scale: Decimal
    offset: Decimal
    min_value: Decimal
    max_value: Decimal
    unit: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.start_byte <= 7:
            raise SignalMapError(f"start_byte {self.start_byte} outside 0-7")
        if not 1 <= self.byte_length <= 4:
            raise SignalMapError(f"byte_length {self.byte_length} outside 1-4")
        if self.start_byte + self.byte_length > 8:
            raise SignalMapError("byte window extends past 8 bytes")
        if self.scale <= 0:
            raise SignalMapError("scale must be positive")
        if self.min_value > self.max_value:
            raise SignalMapError("min exceeds max")
        if self.raw_for(self.min_value) < 0 or self.raw_for(self.max_value) > self.raw_max:
            raise SignalMapError(f"range {self.min_value}..{self.max_value} not representable in {self.byte_length} bytes")

    @property
    def raw_max(self) -> int:
        return (1 << (8 * self.byte_length)) - 1

    def raw_for(self, value: Union[Decimal, Number]) -> int:
        """Raw window integer for a physical value, rounded half away from zero."""
        v = value if isinstance(value, Decimal) else _dec(value)
        return int(((v - self.offset) / self.scale).to_integral_value(rounding=ROUND_HALF_UP))

    def physical(self, raw: int) -> float:
        return float(raw * self.scale + self.offset)

    def overlaps(self, other: "SignalSpec") -> bool:
        return (
            self.start_byte < other.start_byte + other.byte_length
            and other.start_byte < self.start_byte + self.byte_length
        )

    def to_line(self) -> str:
        return " ".join(
            str(x)
            for x in (
                self.identifier, self.start_byte, self.byte_length, self.scale,
                self.offset, self.min_value, self.max_value, self.unit,
            )
        ).rstrip()


def parse_signal_map(text: str) -> list[SignalSpec]:
    specs: list[SignalSpec] = []
    seen: dict[str, SignalSpec] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (7, 8):
            raise SignalMapError(f"expected 7 or 8 fields, got {len(parts)}", lineno)
        try:
            spec = SignalSpec(
                identifier=canonicalize_identifier(parts[0]),
                start_byte=int(parts[1]),
                byte_length=int(parts[2]),
                scale=Decimal(parts[3]),
                offset=Decimal(parts[4]),
                min_value=Decimal(parts[5]),
                max_value=Decimal(parts[6]),
                unit=parts[7] if len(parts) == 8 else "",
            )
        except SignalMapError as exc:
            raise SignalMapError(str(exc), lineno) from None
        except (ValueError, InvalidOperation, FormatError) as exc:
            raise SignalMapError(f"bad field: {exc}", lineno) from None
        prior = seen.get(spec.identifier)
        if prior is not None:
            if prior.overlaps(spec):
                raise SignalMapError(f"overlapping byte windows for {spec.identifier}", lineno)
            raise SignalMapError(f"duplicate identifier {spec.identifier}", lineno)
        seen[spec.identifier] = spec
        specs.append(spec)
    return specs


SignalMap = Mapping[str, SignalSpec]


def signal_map(specs: Iterable[SignalSpec]) -> dict[str, SignalSpec]:
    return {s.identifier: s for s in specs}


def load_signal_map(path: Optional[str] = None) -> dict[str, SignalSpec]:
    """Load a DBC-lite file, or the bundled default map when ``path`` is None."""
    if path is None:
        text = resources.files("obd_firewall").joinpath("data/default.dbcl").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return signal_map(parse_signal_map(text))


class Request(NamedTuple):
    mode: int
    pid: int


class Response(NamedTuple):
    mode: int
    pid: int
    data: bytes


class NonObd(NamedTuple):
    pass


ObdFrameKind = Union[Request, Response, NonObd]


def classify_frame(frame: RawFrame) -> ObdFrameKind:
    d = frame.data
    if frame.extended or len(d) < 3 or not 2 <= d[0] <= len(d) - 1:
        return NonObd()
    if frame.arbitration_id in REQUEST_IDS and d[1] < RESPONSE_OFFSET:
        return Request(d[1], d[2])
    if frame.arbitration_id in RESPONSE_IDS and d[1] >= RESPONSE_OFFSET:
        return Response(d[1] - RESPONSE_OFFSET, d[2], bytes(d[RESPONSE_DATA_START : 1 + d[0]]))
    return NonObd()


def _window(data: bytes, spec: SignalSpec) -> int:
    end = spec.start_byte + spec.byte_length
    if len(data) < end:
        raise DecodeError(f"{spec.identifier}: need {end} data bytes, frame has {len(data)}")
    return int.from_bytes(data[spec.start_byte : end], "big")


def _raw_message(frame: RawFrame) -> DecodedMessage:
    return DecodedMessage(
        frame, identifier_of(frame.arbitration_id), int.from_bytes(frame.data, "big"), "", "raw", "raw"
    )


def decode(frame: RawFrame, smap: SignalMap) -> DecodedMessage:
    """Lift a frame to (identifier, value).  Never fails: frames that no
    codec understands fall back to arbitration-ID hex and the payload integer."""
    kind = classify_frame(frame)
    try:
        if isinstance(kind, Request):
            return DecodedMessage(frame, format(kind.pid, "02X"), 0, "", "obd2", "request")
        if isinstance(kind, Response) and kind.mode == OBD_MODE:
            spec = smap.get(format(kind.pid, "02X"))
            if spec is not None:
                value = spec.physical(_window(kind.data, spec))
                return DecodedMessage(frame, spec.identifier, value, spec.unit, "obd2", "response")
        elif isinstance(kind, NonObd):
            spec = smap.get(identifier_of(frame.arbitration_id))
            if spec is not None:
                value = spec.physical(_window(frame.data, spec))
                return DecodedMessage(frame, spec.identifier, value, spec.unit, "dbc-lite", "signal")
    except DecodeError as exc:
        log.warning("decode failed, using raw fallback: %s", exc)
    return _raw_message(frame)


def encode(message: DecodedMessage, smap: SignalMap) -> RawFrame:
    """Write ``message.value`` back into a copy of ``message.frame``.

    Only the value window changes; ID, flags, dlc and direction are kept.
    """
    frame = message.frame
    if message.kind == "request":
        raise EncodeError(f"{message.identifier}: requests carry no value")
    if message.kind == "raw":
        value = message.value
        if isinstance(value, float):
            if not value.is_integer():
                raise EncodeError(f"{message.identifier}: raw value {value!r} is not an integer")
            value = int(value)
        if not 0 <= value < 1 << (8 * frame.dlc):
            raise EncodeError(f"{message.identifier}: raw value {value} does not fit {frame.dlc} bytes")
        return replace(frame, data=value.to_bytes(frame.dlc, "big") if frame.dlc else b"")
    spec = smap.get(message.identifier)
    if spec is None:
        raise EncodeError(f"no signal spec for {message.identifier}")
    v = _dec(message.value)
    if not spec.min_value <= v <= spec.max_value:
        raise EncodeError(
            f"{message.identifier}: value {message.value!r} outside {spec.min_value}..{spec.max_value}"
        )
    raw = spec.raw_for(v)
    start = spec.start_byte + (RESPONSE_DATA_START if message.kind == "response" else 0)
    end = start + spec.byte_length
    if end > frame.dlc:
        raise EncodeError(f"{message.identifier}: window ends at byte {end}, frame has {frame.dlc}")
    data = bytearray(frame.data)
    data[start:end] = raw.to_bytes(spec.byte_length, "big")
    return replace(frame, data=bytes(data))


def build_request(pid: int, mode: int = OBD_MODE, arbitration_id: int = 0x7DF) -> RawFrame:
    return RawFrame(arbitration_id, bytes([2, mode, pid, 0, 0, 0, 0, 0]))


def build_response(
    spec: SignalSpec, value: Number, mode: int = OBD_MODE, arbitration_id: int = 0x7E8
) -> RawFrame:
    """Single-frame response carrying ``value`` in the signal's window."""
    v = _dec(value)
    if not spec.min_value <= v <= spec.max_value:
        raise EncodeError(f"{spec.identifier}: value {value!r} outside {spec.min_value}..{spec.max_value}")
    n = spec.start_byte + spec.byte_length
    data = bytearray(8)
    data[0] = 2 + n
    data[1] = mode + RESPONSE_OFFSET
    data[2] = int(spec.identifier, 16)
    data[RESPONSE_DATA_START + spec.start_byte : RESPONSE_DATA_START + n] = spec.raw_for(v).to_bytes(
        spec.byte_length, "big"
    )
    return RawFrame(arbitration_id, bytes(data))
