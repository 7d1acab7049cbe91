"""ECU responder, dongle poller and the end-to-end scenarios built from them."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .codec import (
    OBD_MODE, EncodeError, Request, Response, SignalSpec, build_request, build_response,
    classify_frame, decode, load_signal_map,
)
from .engine import Engine
from .model import canonicalize_identifier
from .pipeline import PipelineConfig, run_firewall
from .policy import load_policy, pool_behaviours, validate_policy
from .storage import MemorySink, StorageSink, query
from .transport import BusEndpoint, EndOfStream, Role, TransportError, memory_link

log = logging.getLogger(__name__)

SCENARIOS = ("T1", "T2", "T2-50", "passthrough")
DEFAULT_TIMEOUT_MS = 200

GPS_NOTE = (
    "real dongles may estimate speed from GPS/GSM or phone sensors; "
    "those channels bypass the bus and are not simulated"
)


class ScenarioError(ValueError):
    pass


@dataclass
class ValueGenerator:
    """constant(value), ramp(start, step) clamped to the signal range, or a
    cycled sequence of values."""

    kind: str
    spec: SignalSpec
    value: float = 0.0
    start: float = 0.0
    step: float = 1.0
    values: tuple = ()
    polls: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "ramp", "sequence"):
            raise ScenarioError(f"unknown generator kind {self.kind!r}")
        if self.kind == "sequence" and not self.values:
            raise ScenarioError("sequence generator needs values")
        fixed = {"constant": (self.value,), "sequence": self.values, "ramp": (self.start,)}[self.kind]
        for v in fixed:
            if not self.spec.min_value <= Decimal(repr(float(v))) <= self.spec.max_value:
                raise ScenarioError(f"{self.spec.identifier}: value {v} outside signal range")

    def next(self) -> float:
        k = self.polls
        self.polls += 1
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "sequence":
            return float(self.values[k % len(self.values)])
        v = Decimal(repr(float(self.start))) + k * Decimal(repr(float(self.step)))
        return float(min(max(v, self.spec.min_value), self.spec.max_value))


@dataclass
class EcuProfile:
    generators: dict
    smap: dict
    response_id: int = 0x7E8

    @classmethod
    def from_dict(cls, obj: dict, smap: dict) -> "EcuProfile":
        gens = {}
        for pid, g in obj.get("pids", {}).items():
            pid = canonicalize_identifier(pid)
            spec = smap.get(pid)
            if spec is None:
                raise ScenarioError(f"ECU PID {pid} has no signal spec")
            g = dict(g)
            kind = g.pop("kind")
            if "values" in g:
                g["values"] = tuple(g["values"])
            gens[pid] = ValueGenerator(kind, spec, **g)
        return cls(gens, smap, int(obj.get("response_id", "7E8"), 16))


class EcuSimulator:
    """Answers mode 01 requests for supported PIDs; records what it served."""

    def __init__(self, profile: EcuProfile, transport) -> None:
        self.profile = profile
        self.transport = transport
        self.served: dict[str, list] = {pid: [] for pid in profile.generators}
        self.error: Optional[BaseException] = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="ecu", daemon=True)

    def start(self) -> "EcuSimulator":
        self._thread.start()
        return self

    def stop(self, timeout: float = 2.0) -> None:
        self._stop.set()
        self._thread.join(timeout)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                frame = self.transport.read_frame(0.02)
            except EndOfStream:
                return
            except TransportError as exc:
                self.error = exc
                return
            if frame is None:
                continue
            kind = classify_frame(frame)
            if not isinstance(kind, Request) or kind.mode != OBD_MODE:
                continue
            pid = format(kind.pid, "02X")
            gen = self.profile.generators.get(pid)
            if gen is None:
                continue
            try:
                response = build_response(gen.spec, gen.next(), arbitration_id=self.profile.response_id)
            except EncodeError as exc:
                log.error("ECU cannot encode %s: %s", pid, exc)
                continue
            # ground truth is the quantized value actually on the wire
            self.served[pid].append(decode(response, self.profile.smap).value)
            try:
                self.transport.write_frame(response)
            except TransportError as exc:
                self.error = exc
                return


def run_ecu(profile: EcuProfile, transport) -> EcuSimulator:
    return EcuSimulator(profile, transport).start()


@dataclass
class DonglePlan:
    polls: list  # [(mode, pid)], cycled
    total_polls: int
    interval_ms: int = 1
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    request_id: int = 0x7DF

    def __post_init__(self) -> None:
        if self.interval_ms < 1:
            raise ScenarioError("poll interval must be >= 1 ms")
        if self.timeout_ms < 1:
            raise ScenarioError("timeout must be >= 1 ms")
        if not self.polls:
            raise ScenarioError("poll list is empty")

    @classmethod
    def from_dict(cls, obj: dict) -> "DonglePlan":
        polls = [(int(m, 16), int(p, 16)) for m, p in obj["polls"]]
        return cls(
            polls,
            int(obj["total_polls"]),
            int(obj.get("interval_ms", 1)),
            int(obj.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
            int(obj.get("request_id", "7DF"), 16),
        )


@dataclass
class DongleLog:
    entries: list = field(default_factory=list)  # [(pid, value or None)]
    error: str = ""

    def values(self, pid: str) -> list:
        return [v for p, v in self.entries if p == pid and v is not None]

    def timeouts(self, pid: str) -> int:
        return sum(1 for p, v in self.entries if p == pid and v is None)

    def polls(self, pid: str) -> int:
        return sum(1 for p, _ in self.entries if p == pid)

    def to_dict(self) -> dict:
        return {"entries": [[p, v] for p, v in self.entries], "error": self.error}


def run_dongle(plan: DonglePlan, transport, smap: dict) -> DongleLog:
    """Issue every poll in turn and wait for its response or a timeout."""
    result = DongleLog()
    for k in range(plan.total_polls):
        mode, pid = plan.polls[k % len(plan.polls)]
        name = format(pid, "02X")
        try:
            transport.write_frame(build_request(pid, mode, plan.request_id))
            value = _await_response(transport, mode, pid, smap, plan.timeout_ms / 1000)
        except (TransportError, EndOfStream) as exc:
            result.error = f"transport lost after {k} polls: {exc or 'end of stream'}"
            return result
        result.entries.append((name, value))
        time.sleep(plan.interval_ms / 1000)
    return result


def _await_response(transport, mode: int, pid: int, smap: dict, timeout: float) -> Optional[float]:
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        frame = transport.read_frame(remaining)
        if frame is None:
            return None
        kind = classify_frame(frame)
        if isinstance(kind, Response) and kind.mode == mode and kind.pid == pid:
            msg = decode(frame, smap)
            return msg.value if msg.kind == "response" else int.from_bytes(kind.data, "big")


# -- scenarios -----------------------------------------------------------------


def bundle_path(name: str) -> Path:
    if name in SCENARIOS:
        return Path(str(resources.files("obd_firewall").joinpath("scenarios", name)))
    path = Path(name)
    if path.is_dir():
        return path
    raise ScenarioError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)} or a bundle directory")


@dataclass
class Bundle:
    name: str
    policies: list
    smap: dict
    ecu: EcuProfile
    plan: DonglePlan
    expect: dict

    @classmethod
    def load(cls, name: str) -> "Bundle":
        root = bundle_path(name)
        smap = load_signal_map(str(root / "signals.dbcl"))
        policies = [load_policy(p) for p in sorted(root.glob("policy*.json"))]
        for p in policies:
            report = validate_policy(p)
            if not report.valid:
                raise ScenarioError(f"bundled policy {p.name!r} invalid: {report.violations}")
        ecu = EcuProfile.from_dict(json.loads((root / "ecu.json").read_text("utf-8")), smap)
        plan = DonglePlan.from_dict(json.loads((root / "dongle.json").read_text("utf-8")))
        expect = json.loads((root / "expect.json").read_text("utf-8"))
        return cls(name, policies, smap, ecu, plan, expect)


def _check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def check_expectations(expect: dict, dongle: DongleLog, truth: dict) -> list:
    checks = []
    kind = expect["kind"]
    if kind == "block":
        need = int(expect.get("min_polls", 1))
        for pid in expect["blocked"]:
            got = dongle.values(pid)
            checks.append(_check(
                f"{pid} blocked", not got and dongle.polls(pid) >= need,
                f"{len(got)} values over {dongle.polls(pid)} polls",
            ))
        for pid in expect.get("control", []):
            got = dongle.values(pid)
            checks.append(_check(f"{pid} passes", len(got) >= need, f"{len(got)} values"))
    elif kind == "manipulate":
        for pid, value in expect.get("replace", {}).items():
            got = dongle.values(pid)
            bad = [v for v in got if v != value]
            checks.append(_check(
                f"{pid} replaced by {value}", got and not bad and not dongle.timeouts(pid),
                f"{len(got)} readings, {len(bad)} differ, {dongle.timeouts(pid)} timeouts",
            ))
        for pid, bound in expect.get("limit", {}).items():
            got = dongle.values(pid)
            served = truth.get(pid, [])
            want = [min(v, bound) for v in served]
            checks.append(_check(
                f"{pid} limited to {bound}", bool(got) and got == want,
                f"{len(got)} readings vs {len(served)} served",
            ))
    elif kind == "identity":
        for pid, served in truth.items():
            got = dongle.values(pid)
            checks.append(_check(
                f"{pid} unchanged", bool(served) and got == served and not dongle.timeouts(pid),
                f"{len(got)} readings vs {len(served)} served",
            ))
    else:
        raise ScenarioError(f"unknown expectation kind {kind!r}")
    return checks


def run_scenario(
    name: str,
    cfg: Optional[PipelineConfig] = None,
    sink: Optional[StorageSink] = None,
    timeout_ms: Optional[int] = None,
) -> dict:
    """Wire ECU, firewall and dongle over virtual links and run the plan."""
    report: dict = {"scenario": name, "passed": False, "expectations": [], "notes": [GPS_NOTE], "error": ""}
    ecu = fw = None
    try:
        bundle = Bundle.load(name)
        if timeout_ms is not None:
            bundle.plan.timeout_ms = timeout_ms
        cfg = cfg or PipelineConfig()
        if cfg.storage_enabled and sink is None:
            sink = MemorySink()
        pool, labels = pool_behaviours(bundle.policies)
        engine = Engine(pool, bundle.smap, labels)
        ecu_end, car_end = memory_link()
        dongle_end, fw_dongle_end = memory_link()
        fw = run_firewall(
            cfg,
            BusEndpoint("car", Role.CAR_SIDE, car_end),
            BusEndpoint("dongle", Role.DONGLE_SIDE, fw_dongle_end),
            engine,
            sink if cfg.storage_enabled else None,
        )
        ecu = run_ecu(bundle.ecu, ecu_end)
        dongle = run_dongle(bundle.plan, dongle_end, bundle.smap)
        dongle_end.close()
        ecu_end.close()
        fw.stop_and_wait(10)
        ecu.stop()
        if fw.error:
            raise fw.error
        if ecu.error:
            raise ecu.error
        if dongle.error:
            raise TransportError(dongle.error)
        checks = check_expectations(bundle.expect, dongle, ecu.served)
        report.update(
            passed=all(c["passed"] for c in checks) and bool(checks),
            expectations=checks,
            counters=fw.stats.snapshot(),
            engine=engine.state.snapshot(),
            dongle=dongle.to_dict(),
            ground_truth=ecu.served,
            storage={
                "enabled": cfg.storage_enabled,
                "records": sink.count() if (sink is not None and cfg.storage_enabled) else 0,
                "dropped_records": len(query(sink, verdict="drop")) if (sink is not None and cfg.storage_enabled) else 0,
            },
        )
    except Exception as exc:  # any component failure fails the report
        log.exception("scenario %s failed", name)
        report["error"] = f"{type(exc).__name__}: {exc}"
        report["passed"] = False
    finally:
        if fw is not None and fw.running:
            fw.stop_and_wait(5)
        if ecu is not None:
            ecu.stop()
    return report
