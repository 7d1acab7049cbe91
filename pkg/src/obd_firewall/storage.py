"""Append-only persistence of post-filter message records."""

from __future__ import annotations

import abc
import json
import os
import threading
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

from .model import Action, DecodedMessage, Number, RawFrame, Verdict, canonicalize_identifier, render_text

VERDICTS = ("forward", "modified", "drop")


def parse_timestamp(text: str) -> datetime:
    """RFC3339 timestamp; naive values are taken as UTC."""
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    return ts if ts.tzinfo is not None else ts.replace(tzinfo=timezone.utc)


class StorageError(IOError):
    pass


class QueryError(ValueError):
    pass


@dataclass(frozen=True)
class StoredRecord:
    wall_ts: str
    mono_ts: int
    direction: str
    arbitration_id: str
    payload: str
    decoded_identifier: str
    decoded_value: Number
    decoded_text: str
    verdict: str
    modified_payload: str = ""
    rule_name: str = ""
    behaviour_index: int = -1

    def __post_init__(self) -> None:
        if len(self.decoded_text) > 255:
            raise ValueError("decoded_text longer than 255 characters")
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if (self.verdict == "modified") != bool(self.modified_payload):
            raise ValueError("modified_payload must be set exactly for modified records")

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "StoredRecord":
        obj = json.loads(line)
        return cls(**{f.name: obj[f.name] for f in fields(cls)})

    @property
    def wall_time(self) -> datetime:
        return parse_timestamp(self.wall_ts)


def make_record(
    frame: RawFrame,
    message: DecodedMessage,
    verdict: Verdict,
    rule_name: str = "",
    wall: Optional[datetime] = None,
) -> StoredRecord:
    value = verdict.new_value if verdict.action is Action.MODIFIED else message.value
    wall = wall or datetime.now(timezone.utc)
    return StoredRecord(
        wall_ts=wall.isoformat(timespec="microseconds"),
        mono_ts=frame.ingress_ts,
        direction=frame.direction.value,
        arbitration_id=format(frame.arbitration_id, "X"),
        payload=frame.data.hex(),
        decoded_identifier=message.identifier,
        decoded_value=value,
        decoded_text=render_text(message.identifier, value, message.unit),
        verdict=verdict.action.value,
        modified_payload=verdict.new_frame.data.hex() if verdict.new_frame is not None else "",
        rule_name=rule_name,
        behaviour_index=verdict.behaviour_index,
    )


class StorageSink(abc.ABC):
    """Append-only record sink.  ``append`` is atomic per call."""

    @abc.abstractmethod
    def append(self, records: Sequence[StoredRecord]) -> None: ...

    @abc.abstractmethod
    def flush(self) -> None: ...

    @abc.abstractmethod
    def count(self) -> int: ...

    @abc.abstractmethod
    def records(self) -> Iterator[StoredRecord]: ...

    def close(self) -> None:
        self.flush()


class MemorySink(StorageSink):
    def __init__(self) -> None:
        self._records: list[StoredRecord] = []
        self._lock = threading.Lock()

    def append(self, records: Sequence[StoredRecord]) -> None:
        with self._lock:
            self._records.extend(records)

    def flush(self) -> None:
        pass

    def count(self) -> int:
        return len(self._records)

    def records(self) -> Iterator[StoredRecord]:
        with self._lock:
            snapshot = list(self._records)
        return iter(snapshot)


class JsonlSink(StorageSink):
    """Newline-delimited JSON file, one record per line."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "ab")
        self._count = sum(1 for _ in self.lines())

    def append(self, records: Sequence[StoredRecord]) -> None:
        if not records:
            return
        blob = "".join(r.to_json() + "\n" for r in records).encode("utf-8")
        with self._lock:
            start = self._fh.tell()
            try:
                self._fh.write(blob)
                self._fh.flush()
            except OSError as exc:
                self._rollback(start)
                raise StorageError(f"append to {self.path} failed: {exc}") from exc
            self._count += len(records)

    def _rollback(self, length: int) -> None:
        try:
            self._fh.truncate(length)
            self._fh.seek(length)
        except OSError:
            pass

    def flush(self) -> None:
        with self._lock:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def count(self) -> int:
        return self._count

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                self._fh.close()

    def lines(self) -> Iterator[str]:
        """Complete lines only, so a concurrent reader sees a consistent prefix."""
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            for raw in fh:
                if not raw.endswith(b"\n"):
                    break
                yield raw.decode("utf-8").rstrip("\n")

    def records(self) -> Iterator[StoredRecord]:
        for line in self.lines():
            yield StoredRecord.from_json(line)


def persist_batch(sink: StorageSink, records: Sequence[StoredRecord]) -> int:
    if not records:
        return 0
    sink.append(records)
    return len(records)


@dataclass(frozen=True)
class RecordFilter:
    identifier: Optional[str] = None
    verdict: Optional[str] = None
    since: Optional[datetime] = None
    until: Optional[datetime] = None

    @classmethod
    def build(
        cls,
        identifier: Optional[str] = None,
        verdict: Optional[str] = None,
        since: Union[str, datetime, None] = None,
        until: Union[str, datetime, None] = None,
    ) -> "RecordFilter":
        try:
            ident = canonicalize_identifier(identifier) if identifier is not None else None
        except ValueError as exc:
            raise QueryError(str(exc)) from None
        if verdict is not None and verdict not in VERDICTS:
            raise QueryError(f"verdict must be one of {', '.join(VERDICTS)}, got {verdict!r}")
        bounds = []
        for name, raw in (("since", since), ("until", until)):
            if isinstance(raw, str):
                try:
                    raw = parse_timestamp(raw)
                except ValueError:
                    raise QueryError(f"{name}: not an RFC3339 timestamp: {raw!r}") from None
            if raw is not None and raw.tzinfo is None:
                raw = raw.replace(tzinfo=timezone.utc)
            bounds.append(raw)
        if bounds[0] and bounds[1] and bounds[0] > bounds[1]:
            raise QueryError("since is after until")
        return cls(ident, verdict, bounds[0], bounds[1])

    def __call__(self, r: StoredRecord) -> bool:
        if self.identifier is not None and r.decoded_identifier != self.identifier:
            return False
        if self.verdict is not None and r.verdict != self.verdict:
            return False
        if self.since is not None or self.until is not None:
            t = r.wall_time
            if self.since is not None and t < self.since:
                return False
            if self.until is not None and t > self.until:
                return False
        return True


def query(sink: StorageSink, flt: Optional[RecordFilter] = None, **kwargs) -> list[StoredRecord]:
    """Records matching every given predicate, in append order."""
    flt = flt if flt is not None else RecordFilter.build(**kwargs)
    return [r for r in sink.records() if flt(r)]
