"""Producer -> processor -> batcher pipeline between the car and dongle buses.

Threads per running firewall:

* one producer per endpoint: reads, timestamps and decodes frames, then
  hands each to the processor owning its identifier (bounded queues give
  backpressure);
* ``processor_concurrency`` processors running the engine;
* one egress emitter per direction, releasing frames at their due time;
* one storage batcher flushing records by size or timeout;
* a supervisor that drains everything on stop or end of input.

Routing by identifier keeps per-identifier order intact under concurrency;
order across identifiers is not guaranteed.
"""

from __future__ import annotations

import enum
import gc
import heapq
import logging
import queue
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from .codec import decode
from .engine import Engine, schedule_delayed
from .model import Action, DecodedMessage, Direction, RawFrame, Verdict
from .storage import StorageSink, StoredRecord, make_record, persist_batch
from .transport import BusEndpoint, EndOfStream, Role, TransportError

log = logging.getLogger(__name__)

_STOP = object()


@dataclass(frozen=True)
class PipelineConfig:
    processor_concurrency: int = 1
    batch_size: int = 64
    batch_timeout: int = 50  # ms
    storage_enabled: bool = False
    ingress_buffer: int = 4096
    retries: int = 3
    retry_backoff: float = 0.01  # seconds, doubled per attempt
    poll_interval: float = 0.02  # seconds between stop checks while idle
    # move the heap that exists at start (pool, maps) out of the collector's
    # reach so full collections stay short and do not stall delayed egress
    freeze_heap: bool = True

    def __post_init__(self) -> None:
        for name in ("processor_concurrency", "batch_size", "batch_timeout", "ingress_buffer"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.retries < 1:
            raise ValueError("retries must be >= 1")


class SinkTag(enum.Enum):
    EGRESS = "egress"
    STORAGE = "storage"


@dataclass(frozen=True)
class Outcome:
    frame: RawFrame
    message: DecodedMessage
    verdict: Verdict
    seq: int = 0
    due_at: int = 0

    @property
    def out_frame(self) -> RawFrame:
        return self.verdict.new_frame if self.verdict.new_frame is not None else self.frame


@dataclass
class Batch:
    outcomes: list
    sink: SinkTag
    records: list = field(default_factory=list)
    direction: Optional[Direction] = None


class PipelineStats:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts = {
            d: dict(frames_in=0, forwarded=0, modified=0, dropped=0) for d in Direction
        }
        self.extra = dict(stored=0, storage_dropped=0, encode_errors=0, egress_errors=0)

    def bump(self, direction: Direction, key: str, n: int = 1) -> None:
        with self._lock:
            self._counts[direction][key] += n

    def bump_extra(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.extra[key] += n

    def snapshot(self) -> dict:
        with self._lock:
            out = {}
            for d, c in self._counts.items():
                row = dict(c)
                row["in_flight"] = c["frames_in"] - c["forwarded"] - c["modified"] - c["dropped"]
                out[d.value] = row
            out.update(self.extra)
        return out


class EgressScheduler:
    """Time-ordered release queue for one output direction.

    A frame never overtakes an earlier frame with the same identifier: its
    due time is raised to that frame's due time when needed, and equal due
    times release in ingress order.
    """

    def __init__(self) -> None:
        self._heap: list = []
        self._cond = threading.Condition()
        self._last_due: dict[str, int] = {}
        self._closed = False

    def push(self, outcome: Outcome, due_at: int) -> int:
        with self._cond:
            key = outcome.message.identifier
            due_at = max(due_at, self._last_due.get(key, due_at))
            self._last_due[key] = due_at
            heapq.heappush(self._heap, (due_at, outcome.seq, outcome))
            self._cond.notify()
        return due_at

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __len__(self) -> int:
        with self._cond:
            return len(self._heap)

    def next_batch(self, max_items: int) -> Optional[list]:
        """Block until frames are due; None once closed and empty."""
        with self._cond:
            while True:
                if self._heap:
                    wait = self._heap[0][0] - time.monotonic_ns()
                    if wait <= 0:
                        now = time.monotonic_ns()
                        out = []
                        while self._heap and self._heap[0][0] <= now and len(out) < max_items:
                            due, _, outcome = heapq.heappop(self._heap)
                            out.append(outcome)
                        return out
                    self._cond.wait(wait / 1e9)
                elif self._closed:
                    return None
                else:
                    self._cond.wait()


class Firewall:
    """A running man-in-the-middle between two bus endpoints."""

    def __init__(
        self,
        cfg: PipelineConfig,
        car: BusEndpoint,
        dongle: BusEndpoint,
        engine: Engine,
        sink: Optional[StorageSink] = None,
        on_egress: Optional[Callable[[Outcome, int], None]] = None,
    ) -> None:
        if car.role is not Role.CAR_SIDE or dongle.role is not Role.DONGLE_SIDE:
            raise ValueError("need exactly one car-side and one dongle-side endpoint")
        if cfg.storage_enabled and sink is None:
            raise ValueError("storage enabled but no sink given")
        self.cfg = cfg
        self.engine = engine
        self.sink = sink
        self.on_egress = on_egress
        self.endpoints = {Direction.CAR_TO_DONGLE: car, Direction.DONGLE_TO_CAR: dongle}
        # egress endpoint for each travel direction
        self.egress = {Direction.CAR_TO_DONGLE: dongle, Direction.DONGLE_TO_CAR: car}
        self.stats = PipelineStats()
        self.error: Optional[BaseException] = None
        per_worker = max(1, cfg.ingress_buffer // cfg.processor_concurrency)
        self._work = [queue.Queue(maxsize=per_worker) for _ in range(cfg.processor_concurrency)]
        self._schedulers = {d: EgressScheduler() for d in Direction}
        self._storage_q: "queue.SimpleQueue" = queue.SimpleQueue()
        self._stopping = threading.Event()
        self._done = threading.Event()
        self._threads: list[threading.Thread] = []
        self._started = False

    # -- processing ---------------------------------------------------------

    def process(self, frame: RawFrame, message: Optional[DecodedMessage] = None, seq: int = 0) -> Outcome:
        """Decode (if needed) and evaluate one frame.  No I/O."""
        if message is None:
            message = decode(frame, self.engine.smap)
        verdict = self.engine.evaluate(message)
        if verdict.error:
            self.stats.bump_extra("encode_errors")
        return Outcome(frame, message, verdict, seq)

    def record_for(self, outcome: Outcome) -> StoredRecord:
        return make_record(
            outcome.frame, outcome.message, outcome.verdict, self.engine.label(outcome.verdict.behaviour_index)
        )

    # -- batching -----------------------------------------------------------

    def submit_batch(self, batch: Batch) -> int:
        """Deliver a batch to its sink; returns the number of items acknowledged."""
        if batch.sink is SinkTag.STORAGE:
            if not self.cfg.storage_enabled or self.sink is None:
                return 0
            records = batch.records or [self.record_for(o) for o in batch.outcomes]
            delay = self.cfg.retry_backoff
            for attempt in range(self.cfg.retries):
                try:
                    n = persist_batch(self.sink, records)
                    self.stats.bump_extra("stored", n)
                    return n
                except OSError as exc:
                    log.warning("storage append failed (attempt %d): %s", attempt + 1, exc)
                    time.sleep(delay)
                    delay *= 2
            log.error("dropping %d storage records after %d attempts", len(records), self.cfg.retries)
            self.stats.bump_extra("storage_dropped", len(records))
            return 0

        direction = batch.direction or batch.outcomes[0].frame.direction
        transport = self.egress[direction].transport
        i = 0
        delay = self.cfg.retry_backoff
        failures = 0
        while i < len(batch.outcomes):
            outcome = batch.outcomes[i]
            if outcome.verdict.action is Action.DROP:
                i += 1
                continue
            try:
                transport.write_frame(outcome.out_frame)
            except (TransportError, OSError) as exc:
                failures += 1
                if failures >= self.cfg.retries:
                    raise TransportError(f"egress to {self.egress[direction].name} failed: {exc}") from exc
                time.sleep(delay)
                delay *= 2
                continue
            sent_at = time.monotonic_ns()
            kind = "modified" if outcome.verdict.action is Action.MODIFIED else "forwarded"
            self.stats.bump(direction, kind)
            if self.on_egress is not None:
                self.on_egress(outcome, sent_at)
            i += 1
        transport.flush()
        return i

    # -- threads --------------------------------------------------------------

    def start(self) -> "Firewall":
        if self._started:
            raise RuntimeError("firewall already started")
        self._started = True
        if self.cfg.freeze_heap:
            gc.collect()
            gc.freeze()
        self._producers = [
            threading.Thread(target=self._produce, args=(d,), name=f"producer-{d.value}", daemon=True)
            for d in Direction
        ]
        self._workers = [
            threading.Thread(target=self._work_loop, args=(q,), name=f"processor-{i}", daemon=True)
            for i, q in enumerate(self._work)
        ]
        self._emitters = [
            threading.Thread(target=self._emit_loop, args=(d,), name=f"egress-{d.value}", daemon=True)
            for d in Direction
        ]
        self._batcher = threading.Thread(target=self._storage_loop, name="storage", daemon=True)
        self._threads = self._producers + self._workers + self._emitters + [self._batcher]
        for t in self._threads:
            t.start()
        threading.Thread(target=self._supervise, name="supervisor", daemon=True).start()
        return self

    def stop(self) -> None:
        """Request shutdown; in-flight and delayed frames are still delivered."""
        self._stopping.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    def stop_and_wait(self, timeout: Optional[float] = None) -> bool:
        self.stop()
        return self.wait(timeout)

    @property
    def running(self) -> bool:
        return self._started and not self._done.is_set()

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        log.error("firewall failure: %s", exc)
        self._stopping.set()

    def _produce(self, direction: Direction) -> None:
        endpoint = self.endpoints[direction]
        n = len(self._work)
        seq = 0
        while not self._stopping.is_set():
            try:
                frame = endpoint.transport.read_frame(self.cfg.poll_interval)
            except EndOfStream:
                log.info("end of input on %s", endpoint.name)
                return
            except (TransportError, OSError) as exc:
                self._fail(TransportError(f"{endpoint.name}: {exc}"))
                return
            if frame is None:
                continue
            frame = RawFrame(frame.arbitration_id, frame.data, frame.extended, time.monotonic_ns(), direction)
            message = decode(frame, self.engine.smap)
            self.stats.bump(direction, "frames_in")
            target = self._work[zlib.crc32(message.identifier.encode()) % n] if n > 1 else self._work[0]
            target.put((frame, message, seq))
            seq += 1

    def _work_loop(self, q: queue.Queue) -> None:
        while True:
            item = q.get()
            if item is _STOP:
                return
            frame, message, seq = item
            try:
                outcome = self.process(frame, message, seq)
            except Exception as exc:  # keep the worker alive; the frame is lost
                log.exception("processing failed for %s", message.identifier)
                outcome = Outcome(frame, message, Verdict.drop(error=str(exc)), seq)
            if self.cfg.storage_enabled:
                self._storage_q.put(self.record_for(outcome))
            if outcome.verdict.action is Action.DROP:
                self.stats.bump(frame.direction, "dropped")
                continue
            due = schedule_delayed(outcome.verdict, frame.ingress_ts)
            self._schedulers[frame.direction].push(outcome, due)

    def _emit_loop(self, direction: Direction) -> None:
        sched = self._schedulers[direction]
        while True:
            batch = sched.next_batch(self.cfg.batch_size)
            if batch is None:
                return
            try:
                self.submit_batch(Batch(batch, SinkTag.EGRESS, direction=direction))
            except TransportError as exc:
                self._fail(exc)
                self.stats.bump_extra("egress_errors")
                # account for what can no longer be delivered
                self.stats.bump(direction, "dropped", len(batch))
                while (rest := sched.next_batch(1 << 30)) is not None:
                    self.stats.bump(direction, "dropped", len(rest))
                return

    def _storage_loop(self) -> None:
        pending: list = []
        deadline = None
        timeout = self.cfg.batch_timeout / 1000
        while True:
            wait = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                item = self._storage_q.get(timeout=wait)
            except queue.Empty:
                item = None
            if item is _STOP:
                if pending:
                    self.submit_batch(Batch([], SinkTag.STORAGE, records=pending))
                return
            if item is not None:
                if not pending:
                    deadline = time.monotonic() + timeout
                pending.append(item)
            if pending and (len(pending) >= self.cfg.batch_size or time.monotonic() >= deadline):
                self.submit_batch(Batch([], SinkTag.STORAGE, records=pending))
                pending = []
                deadline = None

    def _supervise(self) -> None:
        for t in self._producers:
            t.join()
        for q in self._work:
            q.put(_STOP)
        for t in self._workers:
            t.join()
        for s in self._schedulers.values():
            s.close()
        for t in self._emitters:
            t.join()
        self._storage_q.put(_STOP)
        self._batcher.join()
        if self.sink is not None:
            try:
                self.sink.flush()
            except OSError as exc:
                log.error("storage flush failed: %s", exc)
        for ep in self.endpoints.values():
            try:
                ep.transport.flush()
            except (TransportError, OSError):
                pass
        if self.cfg.freeze_heap:
            gc.unfreeze()
        self._done.set()


def run_firewall(
    cfg: PipelineConfig,
    car: BusEndpoint,
    dongle: BusEndpoint,
    engine: Engine,
    sink: Optional[StorageSink] = None,
    on_egress: Optional[Callable[[Outcome, int], None]] = None,
) -> Firewall:
    """Start a firewall and return its run handle."""
    return Firewall(cfg, car, dongle, engine, sink, on_egress).start()
