import statistics

import pytest

from diffdeg.capture import serialize_capture
from diffdeg.core import FlowKey
from diffdeg.rtp import parse_rtp
from diffdeg.synth import (BASE_FPS, BASE_MEAN_FRAME_BYTES, BASE_THROUGHPUT_BYTES_PER_S, Adaptive, NonAdaptive,
                           StreamSpec, default_adaptive, default_non_adaptive, default_profiles,
                           gen_dtls_flight, gen_stress_trace, gen_video_stream, profile, snowflake_fixture)

FLOW = FlowKey.of("10.0.0.1", 5000, "10.0.0.2", 6000)


def test_base_frame_size_constant():
    # 151.0 KB/s at 24 fps, to the nearest hundred bytes.
    assert BASE_THROUGHPUT_BYTES_PER_S / BASE_FPS == pytest.approx(6291.67, abs=0.01)
    assert round(BASE_THROUGHPUT_BYTES_PER_S / BASE_FPS, -2) == 6300 == BASE_MEAN_FRAME_BYTES
    assert profile("1080p").mean_frame_bytes == 6300


def test_pixel_ratio_scaling():
    assert profile("540p").mean_frame_bytes == 6300 * (960 * 540) // (1920 * 1080) == 1575
    expected = {"1080p": 6300, "720p": 2800, "540p": 1575, "360p": 700, "240p": 311, "180p": 175}
    assert {p.name: p.mean_frame_bytes for p in default_profiles()} == expected
    assert all(p.fps == 24 for p in default_profiles())
    assert all(p.frame_bytes_stdev == round(0.2 * p.mean_frame_bytes) for p in default_profiles())


def test_unknown_profile():
    with pytest.raises(KeyError):
        profile("4k")


def test_non_adaptive_ten_seconds_is_240_frames():
    s = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, duration_s=10.0))
    assert len(s.frames) == 240
    for f in s.frames:
        pkts = s.packets[f.first_packet : f.first_packet + f.packet_count]
        hdrs = [parse_rtp(p.payload) for p in pkts]
        assert [h.marker for h in hdrs] == [False] * (len(hdrs) - 1) + [True]
        assert {h.timestamp for h in hdrs} == {f.rtp_timestamp}
        assert sum(h.payload_length for h in hdrs) == f.size


def test_adaptive_downshifts_on_loss():
    s = gen_video_stream(default_adaptive(), StreamSpec(flow=FLOW, duration_s=10.0), lambda w, p: 0.25)
    assert s.profiles[0] == "1080p" and s.profiles[1] == "540p"
    first = [f.size for f in s.frames if f.window == 0]
    later = [f.size for f in s.frames if f.window >= 1]
    assert statistics.mean(later) < statistics.mean(first)


def test_adaptive_without_loss_never_changes():
    s = gen_video_stream(default_adaptive(), StreamSpec(flow=FLOW, duration_s=10.0), lambda w, p: 0.0)
    assert set(s.profiles) == {"1080p"}


def test_adaptive_recovers_after_clean_windows():
    losses = iter([0.3, 0.0, 0.0, 0.0])
    s = gen_video_stream(default_adaptive(), StreamSpec(flow=FLOW, duration_s=10.0), lambda w, p: next(losses, 0.0))
    assert s.profiles[:4] == ["1080p", "540p", "540p", "1080p"]


def test_adaptive_ladder_validation():
    with pytest.raises(ValueError):
        Adaptive((profile("540p"), profile("1080p")))
    with pytest.raises(ValueError):
        Adaptive((profile("1080p"),))


def test_non_adaptive_ignores_feedback():
    s = gen_video_stream(NonAdaptive(profile("720p")), StreamSpec(flow=FLOW, duration_s=4.0), lambda w, p: 1.0)
    assert {f.profile for f in s.frames} == {"720p"}


def test_keyframes_are_larger():
    spec = StreamSpec(flow=FLOW, duration_s=20.0, keyframe_interval=24, keyframe_scale=4.0)
    s = gen_video_stream(default_non_adaptive(), spec)
    key = [f.size for f in s.frames if f.ordinal % 24 == 0]
    rest = [f.size for f in s.frames if f.ordinal % 24]
    assert statistics.mean(key) > 3 * statistics.mean(rest)


def test_streams_are_seed_deterministic():
    a = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, seed=5, duration_s=2.0))
    b = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, seed=5, duration_s=2.0))
    c = gen_video_stream(default_non_adaptive(), StreamSpec(flow=FLOW, seed=6, duration_s=2.0))
    assert [p.raw for p in a] == [p.raw for p in b]
    assert [p.raw for p in a] != [p.raw for p in c]
    assert serialize_capture(snowflake_fixture(seed=2)) == serialize_capture(snowflake_fixture(seed=2))


def test_issuer_too_long():
    with pytest.raises(ValueError):
        gen_dtls_flight("x" * 65, FLOW)
    with pytest.raises(ValueError):
        gen_dtls_flight("café", FLOW)


def test_fragment_offset_must_be_inside_message():
    with pytest.raises(ValueError):
        gen_dtls_flight("WebRTC", FLOW, fragment_at=0)


def test_stress_trace_shape():
    t = gen_stress_trace(flows=50, packets=5000, seed=1)
    assert len(t) == 5000
    assert len({p.flow for p in t}) == 100  # both directions of each handshake
    ts = [p.timestamp_us for p in t]
    assert ts == sorted(ts)


def test_spec_validation():
    with pytest.raises(ValueError):
        StreamSpec(mtu_payload_bytes=10)
    with pytest.raises(ValueError):
        StreamSpec(payload_type=200)
