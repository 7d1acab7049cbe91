"""Bus endpoint transports speaking the virtual-bus wire format.

Every transport offers ``read_frame(timeout)``, ``write_frame(frame)``,
``flush()`` and ``close()``.  ``read_frame`` returns None when the timeout
expires, raises :class:`EndOfStream` on an orderly end of input and
:class:`TransportError` on failure.
"""

from __future__ import annotations

import enum
import io
import queue
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional, Protocol

from .model import HEADER_SIZE, Direction, FormatError, RawFrame, from_wire, parse_header


class TransportError(IOError):
    pass


class EndOfStream(Exception):
    pass


class Transport(Protocol):
    def read_frame(self, timeout: Optional[float] = None) -> Optional[RawFrame]: ...

    def write_frame(self, frame: RawFrame) -> None: ...

    def flush(self) -> None: ...

    def close(self) -> None: ...


class Role(enum.Enum):
    CAR_SIDE = "car"
    DONGLE_SIDE = "dongle"

    @property
    def ingress(self) -> Direction:
        return Direction.CAR_TO_DONGLE if self is Role.CAR_SIDE else Direction.DONGLE_TO_CAR


@dataclass
class BusEndpoint:
    name: str
    role: Role
    transport: Transport


_CLOSED = object()


class MemoryTransport:
    """One end of an in-process duplex link.  Frames cross as wire bytes."""

    def __init__(self, inbox: "queue.Queue", outbox: "queue.Queue") -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def read_frame(self, timeout: Optional[float] = None) -> Optional[RawFrame]:
        try:
            item = self._inbox.get(timeout=timeout) if timeout != 0 else self._inbox.get_nowait()
        except queue.Empty:
            return None
        if item is _CLOSED:
            # leave the marker for any later reader
            self._inbox.put(_CLOSED)
            raise EndOfStream()
        return from_wire(item)

    def write_frame(self, frame: RawFrame) -> None:
        if self._closed:
            raise TransportError("write on closed link")
        self._outbox.put(frame.to_wire())

    def flush(self) -> None:
        pass

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def memory_link() -> tuple[MemoryTransport, MemoryTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return MemoryTransport(b_to_a, a_to_b), MemoryTransport(a_to_b, b_to_a)


class _StreamReader:
    """Incremental frame parser over a byte source."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> None:
        self._buf += chunk

    def pop(self) -> Optional[RawFrame]:
        if len(self._buf) < HEADER_SIZE:
            return None
        _, _, dlc = parse_header(bytes(self._buf[:HEADER_SIZE]))
        size = HEADER_SIZE + dlc
        if len(self._buf) < size:
            return None
        frame = from_wire(bytes(self._buf[:size]))
        del self._buf[:size]
        return frame

    @property
    def pending(self) -> int:
        return len(self._buf)


class SocketTransport:
    """Stream socket.  A peer disconnect is a transport error."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._reader = _StreamReader()
        self._wlock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 5.0) -> "SocketTransport":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect to {host}:{port} failed: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    @classmethod
    def listen(cls, host: str, port: int, timeout: Optional[float] = None) -> "SocketTransport":
        with socket.create_server((host, port)) as server:
            server.settimeout(timeout)
            try:
                conn, _ = server.accept()
            except OSError as exc:
                raise TransportError(f"accept on {host}:{port} failed: {exc}") from exc
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(conn)

    def read_frame(self, timeout: Optional[float] = None) -> Optional[RawFrame]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                frame = self._reader.pop()
            except FormatError as exc:
                raise TransportError(f"corrupt stream: {exc}") from exc
            if frame is not None:
                return frame
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return None
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(4096)
            except socket.timeout:
                return None
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("peer disconnected")
            self._reader.feed(chunk)

    def write_frame(self, frame: RawFrame) -> None:
        with self._wlock:
            try:
                self.sock.sendall(frame.to_wire())
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def flush(self) -> None:
        pass

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class FileTransport:
    """Replay frames from one file and capture written frames to another."""

    def __init__(self, in_path: Optional[str], out_path: Optional[str]) -> None:
        self._in = open(in_path, "rb") if in_path else io.BytesIO()
        self._out = open(out_path, "wb") if out_path else None
        self._wlock = threading.Lock()

    def read_frame(self, timeout: Optional[float] = None) -> Optional[RawFrame]:
        header = self._in.read(HEADER_SIZE)
        if not header:
            raise EndOfStream()
        try:
            if len(header) < HEADER_SIZE:
                raise FormatError("truncated header")
            _, _, dlc = parse_header(header)
            body = self._in.read(dlc)
            return from_wire(header + body)
        except FormatError as exc:
            raise TransportError(f"corrupt capture: {exc}") from exc

    def write_frame(self, frame: RawFrame) -> None:
        if self._out is None:
            return
        with self._wlock:
            self._out.write(frame.to_wire())

    def flush(self) -> None:
        if self._out is not None:
            with self._wlock:
                self._out.flush()

    def close(self) -> None:
        self._in.close()
        if self._out is not None:
            with self._wlock:
                self._out.close()


def open_endpoint(spec: str, name: str, role: Role) -> BusEndpoint:
    """Open ``tcp:host:port``, ``listen:host:port`` or ``file:in.bin,out.bin``."""
    kind, _, rest = spec.partition(":")
    if kind in ("tcp", "listen"):
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad endpoint spec {spec!r}; expected {kind}:host:port")
        if kind == "tcp":
            transport = SocketTransport.connect(host, int(port))
        else:
            transport = SocketTransport.listen(host, int(port))
    elif kind == "file":
        in_path, sep, out_path = rest.partition(",")
        if not sep:
            raise ValueError(f"bad endpoint spec {spec!r}; expected file:in.bin,out.bin")
        try:
            transport = FileTransport(in_path or None, out_path or None)
        except OSError as exc:
            raise TransportError(f"cannot open {spec!r}: {exc}") from exc
    else:
        raise ValueError(f"unknown endpoint kind in {spec!r}")
    return BusEndpoint(name, role, transport)
