import pytest
from hypothesis import given
from hypothesis import strategies as st

from obd_firewall.model import (
    Action, Direction, FormatError, RawFrame, Verdict, canonicalize_identifier, from_wire, iter_wire,
)


@pytest.mark.parametrize(
    "raw, expected",
    [("0x0c", "0C"), ("A6", "A6"), ("0x7E8", "7E8"), ("0X00c", "0C"), ("0", "00"), ("1fffffff", "1FFFFFFF")],
)
def test_canonicalize_identifier(raw, expected):
    assert canonicalize_identifier(raw) == expected


@pytest.mark.parametrize("bad", ["", "0x", "xyz", "0x123456789", "12 34", "-1"])
def test_canonicalize_rejects_non_hex(bad):
    with pytest.raises(FormatError, match="hex"):
        canonicalize_identifier(bad)


@given(st.integers(0, 0xFFFFFFFF), st.booleans(), st.booleans())
def test_canonicalize_idempotent(n, prefix, upper):
    text = format(n, "X" if upper else "x")
    text = ("0x" + text) if prefix else text
    once = canonicalize_identifier(text)
    assert canonicalize_identifier(once) == once
    assert int(once, 16) == n


frames = st.builds(
    lambda ext, arb, data, d: RawFrame(arb % ((1 << 29) if ext else (1 << 11)), data, ext, 0, d),
    st.booleans(),
    st.integers(0, (1 << 29) - 1),
    st.binary(max_size=8),
    st.sampled_from(list(Direction)),
)


@given(frames)
def test_wire_round_trip(frame):
    back = from_wire(frame.to_wire(), frame.direction)
    assert back.same_content(frame)
    assert back.dlc == frame.dlc


@given(st.lists(frames, max_size=20))
def test_stream_concatenation(fs):
    blob = b"".join(f.to_wire() for f in fs)
    assert [f.data for f in iter_wire(blob)] == [f.data for f in fs]


def test_wire_layout_is_bit_exact():
    frame = RawFrame(0x7E8, bytes([3, 0x41, 0x0C, 0x64]))
    assert frame.to_wire() == bytes([0, 0, 0, 0x07, 0xE8, 4, 3, 0x41, 0x0C, 0x64])
    ext = RawFrame(0x18DAF110, b"", extended=True)
    assert ext.to_wire() == bytes([1, 0x18, 0xDA, 0xF1, 0x10, 0])


@pytest.mark.parametrize(
    "blob",
    [b"\x00\x00\x00", b"\x02\x00\x00\x00\x01\x00", b"\x00\x00\x00\x00\x01\x09" + bytes(9), b"\x00\x00\x00\x00\x01\x02\x00"],
)
def test_wire_rejects_malformed(blob):
    with pytest.raises(FormatError):
        from_wire(blob)


def test_frame_invariants():
    with pytest.raises(FormatError):
        RawFrame(0x800, b"")  # 11-bit limit
    with pytest.raises(FormatError):
        RawFrame(1 << 29, b"", extended=True)
    with pytest.raises(FormatError):
        RawFrame(1, bytes(9))
    assert RawFrame(0x7FF, bytes(8)).dlc == 8


def test_verdict_invariants():
    with pytest.raises(ValueError):
        Verdict(Action.DROP, release_after=5)
    with pytest.raises(ValueError):
        Verdict(Action.FORWARD, release_after=-1)
    with pytest.raises(ValueError):
        Verdict(Action.DROP, new_frame=RawFrame(1, b""))
    assert Verdict.forward(0).release_after == 0
