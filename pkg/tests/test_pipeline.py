import collections
import gc
import socket
import threading
import time

import pytest

from conftest import drain, engine_for, random_frames, run_capture
from obd_firewall.codec import build_request, build_response, decode, load_signal_map
from obd_firewall.engine import Engine
from obd_firewall.model import Action, Direction, RawFrame, Verdict
from obd_firewall.pipeline import Batch, Firewall, Outcome, PipelineConfig, SinkTag, run_firewall
from obd_firewall.policy import Behaviour
from obd_firewall.storage import MemorySink, StorageError, StorageSink, query
from obd_firewall.transport import (
    BusEndpoint, FileTransport, Role, SocketTransport, TransportError, memory_link, open_endpoint,
)

SMAP = load_signal_map()


def wire(frames):
    return [f.to_wire() for f in frames]


def test_config_invariants():
    for bad in (dict(processor_concurrency=0), dict(batch_size=0), dict(batch_timeout=0)):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_passthrough_empty_pool_1000_frames():
    frames = random_frames(1000, seed=1)
    cap = run_capture(car_frames=frames)
    assert wire(cap.at_dongle) == wire(frames)
    assert cap.at_car == []


def test_t1_pool_blocks_speed_and_odometer(t1_policy):
    requests = [build_request(p) for p in (0x0C, 0xA6, 0x05)] * 5
    responses = []
    for _ in range(5):
        responses += [build_response(SMAP["0C"], 42), build_response(SMAP["A6"], 1.5),
                      RawFrame(0x7E8, bytes([3, 0x41, 0x05, 0x50, 0, 0, 0, 0]))]
    cap = run_capture(car_frames=responses, dongle_frames=requests, engine=engine_for(t1_policy))
    assert [classify(f) for f in cap.at_dongle] == ["05"] * 5
    assert [f.data[2] for f in cap.at_car] == [0x05] * 5


def classify(frame):
    return frame.data[2:3].hex().upper()


def test_storage_disabled_stores_nothing():
    sink = MemorySink()
    fw = Firewall(PipelineConfig(storage_enabled=False), *endpoints(), Engine(smap=SMAP), sink)
    fw.start()
    fw.stop_and_wait(5)
    assert sink.count() == 0
    cap = run_capture(car_frames=random_frames(50, 2), cfg=PipelineConfig(storage_enabled=False), sink=sink)
    assert sink.count() == 0


def endpoints():
    a, car = memory_link()
    b, dongle = memory_link()
    endpoints._keep = (a, b)
    return BusEndpoint("car", Role.CAR_SIDE, car), BusEndpoint("dongle", Role.DONGLE_SIDE, dongle)


def outcome(frame, verdict, seq=0):
    return Outcome(frame, decode(frame, SMAP), verdict, seq)


def test_submit_batch_egress_order_and_drop():
    a, car = memory_link()
    b, dongle = memory_link()
    sink = MemorySink()
    fw = Firewall(PipelineConfig(storage_enabled=True), BusEndpoint("car", Role.CAR_SIDE, car),
                  BusEndpoint("dongle", Role.DONGLE_SIDE, dongle), Engine([Behaviour("reject", "101")], SMAP), sink)
    frames = [RawFrame(0x100 + i, bytes([i])) for i in range(3)]
    outs = [outcome(f, Verdict.forward(), i) for i, f in enumerate(frames)]
    assert fw.submit_batch(Batch(outs, SinkTag.EGRESS, direction=Direction.CAR_TO_DONGLE)) == 3
    assert wire(drain(b)) == wire(frames)

    mixed = [outs[0], outcome(frames[1], Verdict.drop(0)), outs[2]]
    fw.submit_batch(Batch(mixed, SinkTag.EGRESS, direction=Direction.CAR_TO_DONGLE))
    fw.submit_batch(Batch(mixed, SinkTag.STORAGE))
    assert wire(drain(b)) == wire([frames[0], frames[2]])
    assert [r.verdict for r in query(sink)] == ["forward", "drop", "forward"]


def test_submit_storage_batch_when_disabled_is_noop():
    sink = MemorySink()
    fw = Firewall(PipelineConfig(storage_enabled=False), *endpoints(), Engine(smap=SMAP), sink)
    out = outcome(RawFrame(1, b""), Verdict.forward())
    assert fw.submit_batch(Batch([out], SinkTag.STORAGE)) == 0
    assert sink.count() == 0


class FlakySink(StorageSink):
    def __init__(self, failures):
        self.failures = failures
        self.inner = MemorySink()

    def append(self, records):
        if self.failures:
            self.failures -= 1
            raise StorageError("unavailable")
        self.inner.append(records)

    def flush(self):
        pass

    def count(self):
        return self.inner.count()

    def records(self):
        return self.inner.records()


def test_storage_retry_then_drop():
    out = outcome(RawFrame(1, b""), Verdict.forward())
    cfg = PipelineConfig(storage_enabled=True, retries=3, retry_backoff=0.001)
    ok = FlakySink(2)
    fw = Firewall(cfg, *endpoints(), Engine(smap=SMAP), ok)
    assert fw.submit_batch(Batch([out], SinkTag.STORAGE)) == 1
    dead = FlakySink(10)
    fw = Firewall(cfg, *endpoints(), Engine(smap=SMAP), dead)
    assert fw.submit_batch(Batch([out], SinkTag.STORAGE)) == 0
    assert fw.stats.snapshot()["storage_dropped"] == 1


class DeadTransport:
    def read_frame(self, timeout=None):
        time.sleep(timeout or 0)
        return None

    def write_frame(self, frame):
        raise TransportError("bus off")

    def flush(self):
        pass

    def close(self):
        pass


def test_egress_failure_is_fatal():
    a, car = memory_link()
    fw = run_firewall(
        PipelineConfig(retry_backoff=0.001), BusEndpoint("car", Role.CAR_SIDE, car),
        BusEndpoint("dongle", Role.DONGLE_SIDE, DeadTransport()), Engine(smap=SMAP),
    )
    for f in random_frames(5, 3):
        a.write_frame(f)
    assert fw.wait(5)
    assert isinstance(fw.error, TransportError)
    snap = fw.stats.snapshot()["car_to_dongle"]
    assert snap["in_flight"] == 0 and snap["dropped"] == 5


def test_conservation_and_verdict_counts(t2_policy):
    frames = [build_response(SMAP["0C"], v) for v in range(0, 256, 5)]
    frames += [build_response(SMAP["A6"], 10.0)] * 7
    frames += random_frames(30, 4, ids=[0x100, 0x200])
    pool = list(t2_policy.behaviours) + [Behaviour("reject", "100")]
    cap = run_capture(car_frames=frames, pool=pool, smap=SMAP)
    snap = cap.firewall.stats.snapshot()["car_to_dongle"]
    assert snap["frames_in"] == len(frames)
    assert snap["in_flight"] == 0
    assert snap["frames_in"] == snap["forwarded"] + snap["modified"] + snap["dropped"]
    over = sum(1 for v in range(0, 256, 5) if v > 100)
    assert snap["modified"] == over + 7
    assert snap["dropped"] == sum(1 for f in frames if f.arbitration_id == 0x100)


def test_stats_snapshot_mid_run_conserves():
    a, car = memory_link()
    b, dongle = memory_link()
    fw = run_firewall(PipelineConfig(), BusEndpoint("car", Role.CAR_SIDE, car),
                      BusEndpoint("dongle", Role.DONGLE_SIDE, dongle),
                      Engine([Behaviour("limit", "123", 0.0, delay=30)], SMAP))
    for f in random_frames(200, 5, ids=[0x123, 0x124]):
        a.write_frame(f)
    for _ in range(20):
        snap = fw.stats.snapshot()["car_to_dongle"]
        assert snap["in_flight"] >= 0
        assert snap["frames_in"] == snap["forwarded"] + snap["modified"] + snap["dropped"] + snap["in_flight"]
        time.sleep(0.005)
    fw.stop_and_wait(5)
    assert fw.stats.snapshot()["car_to_dongle"]["in_flight"] == 0


def test_stop_drains_delayed_frames():
    a, car = memory_link()
    b, dongle = memory_link()
    fw = run_firewall(PipelineConfig(), BusEndpoint("car", Role.CAR_SIDE, car),
                      BusEndpoint("dongle", Role.DONGLE_SIDE, dongle),
                      Engine([Behaviour("limit", "0C", 255.0, delay=150)], SMAP))
    frames = [build_response(SMAP["0C"], v) for v in range(10)]
    for f in frames:
        a.write_frame(f)
    time.sleep(0.05)
    t0 = time.monotonic()
    fw.stop()
    assert fw.wait(5)
    assert time.monotonic() - t0 >= 0.05  # waited for the delayed frames
    assert wire(drain(b)) == wire(frames)


def test_delayed_frames_hold_back_later_same_identifier():
    # the val_range makes only the first frame delayed; the second must not overtake it
    pool = [Behaviour("limit", "0C", 255.0, delay=80, val_range=(0.0, 10.0))]
    frames = [build_response(SMAP["0C"], 5), build_response(SMAP["0C"], 50), RawFrame(0x123, b"\x01")]
    cap = run_capture(car_frames=frames, pool=pool, smap=SMAP)
    assert wire(cap.at_dongle) == wire([frames[2], frames[0], frames[1]])


@pytest.mark.parametrize("concurrency", [1, 4])
def test_per_identifier_order_under_concurrency(concurrency):
    frames = random_frames(2000, 6, ids=[0x100 + i for i in range(12)])
    pool = [Behaviour("limit", format(0x100 + i, "X"), 0.0) for i in range(0, 12, 3)]
    cap = run_capture(car_frames=frames, pool=pool, smap=SMAP, cfg=PipelineConfig(processor_concurrency=concurrency))
    by_id = collections.defaultdict(list)
    for f in cap.at_dongle:
        by_id[f.arbitration_id].append(f.data)
    ref = run_capture(car_frames=frames, pool=pool, smap=SMAP)
    ref_by_id = collections.defaultdict(list)
    for f in ref.at_dongle:
        ref_by_id[f.arbitration_id].append(f.data)
    assert by_id == ref_by_id


def test_file_transport_replay(tmp_path):
    frames = random_frames(100, 8)
    src = tmp_path / "in.bin"
    src.write_bytes(b"".join(wire(frames)))
    out = tmp_path / "out.bin"
    car = open_endpoint(f"file:{src},", "car", Role.CAR_SIDE)
    dongle = open_endpoint(f"file:,{out}", "dongle", Role.DONGLE_SIDE)
    fw = run_firewall(PipelineConfig(), car, dongle, Engine(smap=SMAP))
    assert fw.wait(10) and fw.error is None
    dongle.transport.close()
    assert out.read_bytes() == src.read_bytes()


def test_file_transport_corrupt_input(tmp_path):
    src = tmp_path / "in.bin"
    src.write_bytes(b"\x00\x00\x00\x01\x23\x05\x01")
    t = FileTransport(str(src), None)
    with pytest.raises(TransportError):
        t.read_frame()


@pytest.mark.parametrize("spec", ["tcp:nohost", "udp:1:2", "file:only", "tcp:host:port"])
def test_bad_endpoint_specs(spec):
    with pytest.raises(ValueError):
        open_endpoint(spec, "x", Role.CAR_SIDE)


def _server_pair():
    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]
    client = SocketTransport.connect("127.0.0.1", port)
    conn, _ = server.accept()
    server.close()
    return SocketTransport(conn), client, port


def test_socket_transport_round_trip_and_disconnect():
    frames = random_frames(200, 9)
    peer_car, fw_car = _server_pair()[:2]
    peer_dongle, fw_dongle = _server_pair()[:2]
    fw = run_firewall(PipelineConfig(), BusEndpoint("car", Role.CAR_SIDE, fw_car),
                      BusEndpoint("dongle", Role.DONGLE_SIDE, fw_dongle), Engine(smap=SMAP))
    for f in frames:
        peer_car.write_frame(f)
    got = []
    deadline = time.monotonic() + 5
    while len(got) < len(frames) and time.monotonic() < deadline:
        f = peer_dongle.read_frame(0.1)
        if f is not None:
            got.append(f)
    assert wire(got) == wire(frames)
    peer_car.close()
    assert fw.wait(5)
    assert isinstance(fw.error, TransportError) and "disconnected" in str(fw.error)
    assert fw.stats.snapshot()["car_to_dongle"]["in_flight"] == 0


def test_socket_reader_handles_fragmented_stream():
    a, b = socket.socketpair()
    t = SocketTransport(b)
    frames = random_frames(20, 10)
    blob = b"".join(wire(frames))

    def dribble():
        for i in range(0, len(blob), 3):
            a.sendall(blob[i : i + 3])

    th = threading.Thread(target=dribble)
    th.start()
    got = [t.read_frame(2) for _ in frames]
    th.join()
    assert wire(got) == wire(frames)
    a.close()
    with pytest.raises(TransportError):
        t.read_frame(1)


def test_storage_records_every_frame_including_drops(t1_policy):
    sink = MemorySink()
    responses = [build_response(SMAP["0C"], 1), build_response(SMAP["A6"], 2.0), RawFrame(0x123, b"")]
    cap = run_capture(car_frames=responses, engine=engine_for(t1_policy),
                      cfg=PipelineConfig(storage_enabled=True, batch_size=2, batch_timeout=5), sink=sink)
    assert sink.count() == 3
    drops = query(sink, verdict="drop")
    assert [r.decoded_identifier for r in drops] == ["0C", "A6"]
    assert drops[0].rule_name == "t1[0]" and drops[1].behaviour_index == 1
    fwd = query(sink, verdict="forward")
    assert bytes.fromhex(fwd[0].payload) == cap.at_dongle[0].data


def test_heap_frozen_only_while_running():
    a, car = memory_link()
    b, dongle = memory_link()
    fw = run_firewall(PipelineConfig(), BusEndpoint("car", Role.CAR_SIDE, car),
                      BusEndpoint("dongle", Role.DONGLE_SIDE, dongle), Engine(smap=SMAP))
    assert gc.get_freeze_count() > 0
    a.close()
    b.close()
    assert fw.wait(5)
    assert gc.get_freeze_count() == 0
