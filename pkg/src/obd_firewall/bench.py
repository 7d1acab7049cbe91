"""Per-message pipeline latency versus behaviour-pool size.

Frames come from an in-memory generator and go straight through the
processing path (decode, evaluate, storage record, egress write to a
discarding transport), so transport time is excluded.
"""

from __future__ import annotations

import gc
import random
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

from .codec import build_response, load_signal_map
from .engine import Engine
from .model import RawFrame
from .pipeline import Batch, Firewall, PipelineConfig, SinkTag
from .policy import Behaviour
from .transport import BusEndpoint, Role

DEFAULT_SIZES = (3, 30, 300, 3000, 30000)
COLUMNS = (
    "Measurement", "Iterations per Second", "Average", "Deviation",
    "Median", "Minimum", "Maximum", "Sample Size",
)


@dataclass
class LatencyRow:
    behaviours: int
    iterations_per_s: float
    average_ms: float
    deviation_pct: float
    median_ms: float
    min_ms: float
    max_ms: float
    samples: int

    def cells(self) -> list[str]:
        return [
            f"{self.behaviours} behaviours",
            f"{self.iterations_per_s:.2f}",
            f"{self.average_ms:.4f} ms",
            f"±{self.deviation_pct:.2f}%",
            f"{self.median_ms:.4f} ms",
            f"{self.min_ms:.4f} ms",
            f"{self.max_ms:.4f} ms",
            str(self.samples),
        ]

    def to_dict(self) -> dict:
        return asdict(self)


class _NullTransport:
    def read_frame(self, timeout=None):
        return None

    def write_frame(self, frame: RawFrame) -> None:
        pass

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


def synthetic_pool(size: int, rng: random.Random) -> list[Behaviour]:
    """The first three behaviours act on the probe PIDs; the rest sit on
    identifiers the probe traffic never carries, so every message scans the
    whole pool."""
    head = [
        Behaviour("limit", "0C", 100.0),
        Behaviour("replace", "A6", 200000.0),
        Behaviour("reject", "0D"),
    ]
    pool = head[:size]
    kinds = ("reject", "limit", "replace")
    for i in range(len(pool), size):
        ident = format(rng.randrange(0x100, 0x800), "X")
        pool.append(Behaviour(kinds[i % 3], ident, float(rng.randrange(256))))
    return pool


def probe_frames(n: int, rng: random.Random) -> list[RawFrame]:
    smap = load_signal_map()
    speed, odo = smap["0C"], smap["A6"]
    out = []
    for i in range(n):
        if i % 2:
            out.append(build_response(odo, rng.randrange(0, 10_000_000) / 10))
        else:
            out.append(build_response(speed, rng.randrange(256)))
    return out


def _row(size: int, samples_ns: list[int]) -> LatencyRow:
    ms = [s / 1e6 for s in samples_ns]
    avg = statistics.fmean(ms)
    dev = statistics.stdev(ms) / avg * 100 if len(ms) > 1 and avg > 0 else 0.0
    return LatencyRow(
        behaviours=size,
        iterations_per_s=1000 / avg if avg > 0 else float("inf"),
        average_ms=avg,
        deviation_pct=dev,
        median_ms=statistics.median(ms),
        min_ms=min(ms),
        max_ms=max(ms),
        samples=len(ms),
    )


def measure_latency(
    pool_sizes: Iterable[int], frames_per_run: int, seed: int = 0, warmup: int = 10, block: int = 100
) -> list[LatencyRow]:
    """One row per requested pool size (repeats allowed), same columns as the
    usual benchmark table.

    Sizes take turns in blocks of ``block`` timed messages, each block
    preceded by ``warmup`` untimed ones to restore the caches.  A transient
    slowdown of the host is then shared across sizes instead of skewing
    whichever one happened to be running.
    """
    if frames_per_run < 1:
        raise ValueError("frames_per_run must be >= 1")
    if block < 1:
        raise ValueError("block must be >= 1")
    sizes = list(pool_sizes)
    if not sizes:
        raise ValueError("need at least one pool size")
    for size in sizes:
        if size < 0:
            raise ValueError(f"pool size must be >= 0, got {size}")
    smap = load_signal_map()
    runs = []
    for size in sizes:
        rng = random.Random(seed)
        engine = Engine(synthetic_pool(size, rng), smap)
        fw = Firewall(
            PipelineConfig(storage_enabled=False),
            BusEndpoint("car", Role.CAR_SIDE, _NullTransport()),
            BusEndpoint("dongle", Role.DONGLE_SIDE, _NullTransport()),
            engine,
        )
        runs.append((fw, probe_frames(frames_per_run, rng), rng, []))
    # collector pauses would land on whichever message triggered them
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for lo in range(0, frames_per_run, block):
            for fw, frames, rng, samples in runs:
                for frame in probe_frames(warmup, rng):
                    _one(fw, frame)
                for frame in frames[lo : lo + block]:
                    t0 = time.perf_counter_ns()
                    _one(fw, frame)
                    samples.append(time.perf_counter_ns() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return [_row(size, samples) for size, (_, _, _, samples) in zip(sizes, runs)]


def _one(fw: Firewall, frame: RawFrame) -> None:
    outcome = fw.process(frame)
    fw.record_for(outcome)
    fw.submit_batch(Batch([outcome], SinkTag.EGRESS, direction=frame.direction))


def format_table(rows: list[LatencyRow]) -> str:
    table = [list(COLUMNS)] + [r.cells() for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(COLUMNS))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(line, widths)) for line in table)
