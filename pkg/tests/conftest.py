from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field

import pytest

from obd_firewall.codec import load_signal_map
from obd_firewall.engine import Engine
from obd_firewall.model import Direction, RawFrame
from obd_firewall.pipeline import PipelineConfig, run_firewall
from obd_firewall.policy import parse_policy, pool_behaviours
from obd_firewall.transport import BusEndpoint, Role, memory_link

T1_POLICY = {
    "name": "t1",
    "description": "",
    "version": "1.0",
    "protocol": "CAN",
    "behaviours": [{"type": "reject", "identifier": "0C"}, {"type": "reject", "identifier": "A6"}],
}
T2_POLICY = {
    "name": "t2",
    "description": "",
    "version": "1.0",
    "protocol": "CAN",
    "behaviours": [
        {"type": "replace", "identifier": "A6", "value": 200000.0},
        {"type": "limit", "identifier": "0C", "value": 100},
    ],
}


_acceptance: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    key = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _acceptance[key] = _acceptance.get(key, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), ok in sorted(_acceptance.items()):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}")


@pytest.fixture
def smap():
    return load_signal_map()


@pytest.fixture
def t1_policy():
    return parse_policy(json.dumps(T1_POLICY))


@pytest.fixture
def t2_policy():
    return parse_policy(json.dumps(T2_POLICY))


def random_frames(n: int, seed: int, ids=None) -> list[RawFrame]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        extended = rng.random() < 0.2
        if ids is not None:
            arb = rng.choice(ids)
            extended = False
        else:
            arb = rng.randrange(1 << 29) if extended else rng.randrange(1 << 11)
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(9)))
        out.append(RawFrame(arb, data, extended))
    return out


@dataclass
class Capture:
    """Frames seen at each test-side end after a firewall run."""

    at_dongle: list = field(default_factory=list)
    at_car: list = field(default_factory=list)
    firewall: object = None
    egress_log: list = field(default_factory=list)


def drain(end) -> list:
    out = []
    while True:
        try:
            frame = end.read_frame(0)
        except Exception:
            break
        if frame is None:
            break
        out.append(frame)
    return out


def run_capture(
    car_frames=(),
    dongle_frames=(),
    pool=(),
    smap=None,
    cfg=None,
    sink=None,
    labels=None,
    engine=None,
) -> Capture:
    """Push frames through a firewall over memory links until drained."""
    cfg = cfg or PipelineConfig()
    engine = engine or Engine(pool, smap or load_signal_map(), labels)
    ecu_end, car_end = memory_link()
    dongle_end, fw_dongle_end = memory_link()
    cap = Capture()
    lock = threading.Lock()

    def on_egress(outcome, sent_at):
        with lock:
            cap.egress_log.append((outcome, sent_at))

    fw = run_firewall(
        cfg,
        BusEndpoint("car", Role.CAR_SIDE, car_end),
        BusEndpoint("dongle", Role.DONGLE_SIDE, fw_dongle_end),
        engine,
        sink,
        on_egress,
    )
    for f in car_frames:
        ecu_end.write_frame(f)
    for f in dongle_frames:
        dongle_end.write_frame(f)
    ecu_end.close()
    dongle_end.close()
    assert fw.wait(60), "firewall did not drain"
    cap.at_dongle = drain(dongle_end)
    cap.at_car = drain(ecu_end)
    cap.firewall = fw
    return cap


def engine_for(*policies, smap=None) -> Engine:
    pool, labels = pool_behaviours(policies)
    return Engine(pool, smap or load_signal_map(), labels)


__all__ = ["Capture", "Direction", "T1_POLICY", "T2_POLICY", "drain", "engine_for", "random_frames", "run_capture"]
