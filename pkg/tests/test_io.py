import json
import logging
import struct

import pytest

from diffdeg.attack import DataChannelBlock, FixedDelay, FrameDrop
from diffdeg.capture import (CaptureError, Trace, TruncatedCaptureError, UnsupportedFormatError, parse_capture,
                             read_capture, serialize_capture, write_capture)
from diffdeg.core import FlowKey, LINKTYPE_RAW, VerdictKind
from diffdeg.engine import HostUnavailableError, LiveAdapter, MemoryHost, run_offline
from diffdeg.report import RunReport, read_report, without_run_timestamp, write_report
from diffdeg.synth import (StreamSpec, default_non_adaptive, gen_app_data, gen_video_stream, merge,
                           snowflake_fixture, udp_packet)

FLOW = FlowKey.of("10.0.0.1", 5000, "10.0.0.2", 6000)


def _ten():
    return merge(gen_app_data(FLOW, 10))


def _swap_endianness(data: bytes) -> bytes:
    out = bytearray(struct.pack(">IHHiIII", *struct.unpack_from("<IHHiIII", data, 0)))
    off = 24
    while off < len(data):
        sec, usec, incl, orig = struct.unpack_from("<IIII", data, off)
        out += struct.pack(">IIII", sec, usec, incl, orig) + data[off + 16 : off + 16 + incl]
        off += 16 + incl
    return bytes(out)


def test_ten_packet_round_trip(tmp_path):
    trace = _ten()
    path = tmp_path / "t.pcap"
    write_capture(trace, path)
    back = read_capture(path)
    assert len(back) == 10
    assert [p.payload for p in back] == [p.payload for p in trace]
    assert serialize_capture(back) == path.read_bytes()


def test_byte_swapped_magic():
    data = serialize_capture(_ten())
    swapped = _swap_endianness(data)
    back = parse_capture(swapped)
    assert back.byte_order == ">"
    assert [(p.timestamp_us, p.raw) for p in back] == [(p.timestamp_us, p.raw) for p in parse_capture(data)]
    assert serialize_capture(back) == swapped


def test_truncated_record_names_ordinal():
    data = serialize_capture(_ten())
    with pytest.raises(TruncatedCaptureError) as exc:
        parse_capture(data[:-5])
    assert exc.value.ordinal == 9
    assert "#9" in str(exc.value)


def test_nanosecond_and_unknown_formats_rejected():
    data = bytearray(serialize_capture(_ten()))
    struct.pack_into("<I", data, 0, 0xA1B23C4D)
    with pytest.raises(UnsupportedFormatError):
        parse_capture(bytes(data))
    with pytest.raises(UnsupportedFormatError):
        parse_capture(b"\x0a\x0d\x0d\x0a" + bytes(40))
    struct.pack_into("<I", data, 0, 0xA1B2C3D4)
    struct.pack_into("<I", data, 20, 113)
    with pytest.raises(UnsupportedFormatError):
        parse_capture(bytes(data))


def test_bad_microseconds_field():
    data = bytearray(serialize_capture(_ten()))
    struct.pack_into("<I", data, 28, 1_000_000)
    with pytest.raises(CaptureError):
        parse_capture(bytes(data))


def test_raw_linktype_round_trip():
    pkts = [udp_packet(i, FLOW, b"\x17abc") for i in range(3)]
    raw = Trace([type(p)(p.timestamp_us, p.raw[14:], i) for i, p in enumerate(pkts)], LINKTYPE_RAW)
    back = parse_capture(serialize_capture(raw))
    assert back.linktype == LINKTYPE_RAW
    assert all(p.flow == FLOW and p.payload == b"\x17abc" for p in back)


def test_header_metadata_preserved():
    t = _ten()
    t.snaplen, t.thiszone, t.sigfigs = 1500, -3600, 7
    back = parse_capture(serialize_capture(t))
    assert (back.snaplen, back.thiszone, back.sigfigs) == (1500, -3600, 7)


def test_empty_chain_is_identity():
    trace = parse_capture(serialize_capture(snowflake_fixture(seed=1)))
    out, report = run_offline(trace, None)
    assert serialize_capture(out) == serialize_capture(trace)
    assert report.totals["packets_dropped"] == 0 and report.totals["conserved"]


def test_frame_drop_one_removes_all_video():
    stream = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, duration_s=2.0))
    out, report = run_offline(merge(stream.packets), FrameDrop(1.0))
    assert len(out) == 0
    pol = report.stats["policies"][0]
    assert pol["frames_dropped"] == pol["frames_seen"] == 48


def test_fixed_delay_shifts_every_timestamp():
    trace = merge(gen_app_data(FLOW, 20, interval_us=1000))
    out, _ = run_offline(trace, FixedDelay(200))
    assert [p.timestamp_us for p in out] == [p.timestamp_us + 200_000 for p in trace]


def test_delay_with_frame_drop_never_emits_dropped_frames():
    stream = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, duration_s=2.0))
    out, _ = run_offline(merge(stream.packets), [FrameDrop(1.0), FixedDelay(100)])
    assert len(out) == 0


def test_output_reordered_by_delayed_timestamps():
    a = gen_app_data(FLOW, 3, interval_us=1000)
    b = gen_app_data(FLOW.reverse(), 3, start_us=500, interval_us=1000)
    out, _ = run_offline(merge(a, b), FixedDelay(2, from_addrs={"10.0.0.1"}))
    ts = [p.timestamp_us for p in out]
    assert ts == sorted(ts)
    assert out[0].flow == FLOW.reverse()


def test_sharded_equals_single():
    trace = snowflake_fixture(seed=2, audio=True)
    chain = [DataChannelBlock(), FrameDrop(0.3, seed=9)]
    single, r1 = run_offline(trace, chain)
    sharded, r4 = run_offline(trace, chain, shards=4, threads=4)
    assert serialize_capture(single) == serialize_capture(sharded)
    assert r1.dumps() == r4.dumps()


def test_live_adapter_contract(caplog):
    trace = snowflake_fixture(seed=0)
    host = MemoryHost()
    live = LiveAdapter(DataChannelBlock(), host)
    live.start()
    verdicts = [live.on_packet(p) for p in trace]
    _, report = run_offline(trace, DataChannelBlock())
    assert sum(v.is_drop for v in verdicts) == report.totals["packets_dropped"] > 0
    assert live.stats.verdicts == len(trace)
    live.stop()

    pkts = gen_app_data(FLOW, 1000, interval_us=1)
    nodelay = LiveAdapter(FixedDelay(50), MemoryHost(supports_delay=False))
    nodelay.start()
    with caplog.at_level(logging.WARNING):
        out = [nodelay.on_packet(p) for p in pkts]
    assert all(v.kind is VerdictKind.PASS for v in out)
    assert nodelay.stats.delay_downgrades == 1000
    assert "downgraded" in caplog.text

    withdelay = LiveAdapter(FixedDelay(50), host)
    withdelay.start()
    withdelay.on_packet(pkts[0])
    assert host.reinjected[-1][0] == pkts[0].timestamp_us + 50_000


def test_live_adapter_reports_missing_host():
    live = LiveAdapter(None, MemoryHost(available=False))
    with pytest.raises(HostUnavailableError):
        live.start()
    with pytest.raises(HostUnavailableError):
        live.on_packet(gen_app_data(FLOW, 1)[0])


def test_report_round_trip(tmp_path):
    _, report = run_offline(snowflake_fixture(seed=3), DataChannelBlock(), seed=3, config={"seed": 3})
    report.run_timestamp = "2026-01-01T00:00:00+00:00"
    report.results = {"ratio": float("inf")}
    path = tmp_path / "r.json"
    write_report(report, path)
    assert read_report(path) == report
    json.loads(path.read_text())  # strict JSON, no bare Infinity


def test_reports_equal_modulo_timestamp():
    trace = snowflake_fixture(seed=4)
    _, a = run_offline(trace, FrameDrop(0.5, seed=1), seed=1)
    _, b = run_offline(trace, FrameDrop(0.5, seed=1), seed=1)
    a.run_timestamp, b.run_timestamp = "t1", "t2"
    assert a.dumps() != b.dumps()
    assert without_run_timestamp(a.to_dict()) == without_run_timestamp(b.to_dict())


def test_empty_stats_report_is_valid_json():
    _, report = run_offline(Trace(), None)
    doc = json.loads(report.dumps())
    assert doc["totals"]["packets_in"] == 0 and doc["stats"]["packets_seen"] == 0


def test_report_schema_checked():
    with pytest.raises(ValueError):
        RunReport.from_dict({"schema": "other"})
    with pytest.raises(ValueError):
        RunReport.from_dict({"schema": "diffdeg.run-report", "schema_version": 99})


def test_state_bound_instrumented():
    _, report = run_offline(snowflake_fixture(seed=5), [DataChannelBlock(), FrameDrop(0.2)])
    assert 0 < report.stats["state_max_bytes"] <= 256
    assert all(f["state_bytes"] <= 256 for f in report.flows)
