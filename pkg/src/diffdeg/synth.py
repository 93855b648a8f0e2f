"""Deterministic fixtures: DTLS flights, RTP video/audio streams, Ethernet/IP framing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .capture import Trace
from .core import (ETHERTYPE_IPV4, ETHERTYPE_IPV6, LINKTYPE_ETHERNET, FlowKey, Packet)
from .dtls import (APPLICATION_DATA, CHANGE_CIPHER_SPEC, DTLS_1_2, HANDSHAKE, HT_CERTIFICATE,
                   HT_CLIENT_HELLO, HT_SERVER_HELLO, HT_SERVER_HELLO_DONE, DtlsRecord,
                   HandshakeMessage)
from .rtp import emit_rtp

RTP_CLOCK_HZ = 90_000
SRC_MAC = bytes.fromhex("020000000001")
DST_MAC = bytes.fromhex("020000000002")
MAX_ISSUER_LEN = 64

# --- framing ---------------------------------------------------------------


def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ip_frame(flow: FlowKey, transport: bytes, ident: int = 0) -> bytes:
    """Ethernet + IPv4/IPv6 around an already-built transport segment."""
    if flow.src_addr.version == 4:
        hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(transport), ident & 0xFFFF, 0x4000, 64,
                          flow.proto, 0, flow.src_addr.packed, flow.dst_addr.packed)
        hdr = hdr[:10] + struct.pack("!H", _ipv4_checksum(hdr)) + hdr[12:]
        ethertype = ETHERTYPE_IPV4
    else:
        hdr = struct.pack("!IHBB16s16s", 6 << 28, len(transport), flow.proto, 64,
                          flow.src_addr.packed, flow.dst_addr.packed)
        ethertype = ETHERTYPE_IPV6
    return DST_MAC + SRC_MAC + struct.pack("!H", ethertype) + hdr + transport


def udp_frame(flow: FlowKey, payload: bytes, ident: int = 0) -> bytes:
    udp = struct.pack("!HHHH", flow.src_port, flow.dst_port, 8 + len(payload), 0) + payload
    return ip_frame(flow, udp, ident)


def tcp_frame(flow: FlowKey, payload: bytes, seq: int = 0, ack: int = 0, flags: int = 0x18) -> bytes:
    tcp = struct.pack("!HHIIBBHHH", flow.src_port, flow.dst_port, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                      5 << 4, flags, 65535, 0, 0) + payload
    return ip_frame(flow, tcp)


def udp_packet(timestamp_us: int, flow: FlowKey, payload: bytes, index: int = 0) -> Packet:
    return Packet(timestamp_us, udp_frame(flow, payload, index), index, None, flow, bytes(payload))


def tcp_packet(timestamp_us: int, flow: FlowKey, payload: bytes, seq: int = 0, index: int = 0) -> Packet:
    return Packet(timestamp_us, tcp_frame(flow, payload, seq), index, None, flow, bytes(payload))


def merge(*streams: Sequence[Packet], linktype: int = LINKTYPE_ETHERNET) -> Trace:
    """Interleave packet lists by timestamp and renumber original_index."""
    tagged = [(p.timestamp_us, s, i, p) for s, stream in enumerate(streams) for i, p in enumerate(stream)]
    tagged.sort(key=lambda t: t[:3])
    packets = []
    for idx, (_, _, _, p) in enumerate(tagged):
        packets.append(Packet(p.timestamp_us, p.raw, idx, p.orig_len, p.flow, p.payload))
    return Trace(packets, linktype)


# --- DER certificates ------------------------------------------------------


def _der(tag: int, content: bytes) -> bytes:
    n = len(content)
    if n < 0x80:
        length = bytes([n])
    else:
        raw = n.to_bytes((n.bit_length() + 7) // 8, "big")
        length = bytes([0x80 | len(raw)]) + raw
    return bytes([tag]) + length + content


def _name(cn: str) -> bytes:
    atv = _der(0x30, _der(0x06, b"\x55\x04\x03") + _der(0x0C, cn.encode("utf-8")))
    return _der(0x30, _der(0x31, atv))


_SHA256_ECDSA = _der(0x30, _der(0x06, bytes.fromhex("2a8648ce3d040302")))
_EC_P256_SPKI_ALG = _der(0x30, _der(0x06, bytes.fromhex("2a8648ce3d0201")) + _der(0x06, bytes.fromhex("2a8648ce3d030107")))


def check_issuer(issuer: str) -> None:
    if len(issuer.encode("utf-8")) > MAX_ISSUER_LEN:
        raise ValueError(f"issuer longer than {MAX_ISSUER_LEN} bytes")
    if not all(0x20 <= ord(c) <= 0x7E for c in issuer):
        raise ValueError("issuer must be printable ASCII")


def build_certificate(issuer: str, subject: Optional[str] = None, serial: int = 1, seed: int = 0) -> bytes:
    """Minimal self-signed-looking X.509 DER. Key and signature bytes are random filler."""
    check_issuer(issuer)
    rng = np.random.default_rng(seed)
    validity = _der(0x30, _der(0x17, b"250101000000Z") + _der(0x17, b"350101000000Z"))
    spki = _der(0x30, _EC_P256_SPKI_ALG + _der(0x03, b"\x00\x04" + rng.bytes(64)))
    tbs = _der(0x30,
               _der(0xA0, _der(0x02, b"\x02"))
               + _der(0x02, serial.to_bytes(max(1, (serial.bit_length() + 8) // 8), "big"))
               + _SHA256_ECDSA
               + _name(issuer)
               + validity
               + _name(subject if subject is not None else issuer)
               + spki)
    return _der(0x30, tbs + _SHA256_ECDSA + _der(0x03, b"\x00" + rng.bytes(72)))


def certificate_message(certs: Sequence[bytes], message_seq: int = 1) -> HandshakeMessage:
    entries = b"".join(len(c).to_bytes(3, "big") + c for c in certs)
    return HandshakeMessage(HT_CERTIFICATE, message_seq, len(entries).to_bytes(3, "big") + entries)


def handshake_record(fragment_bytes: bytes, seq: int, epoch: int = 0, version: bytes = DTLS_1_2) -> DtlsRecord:
    return DtlsRecord(HANDSHAKE, version, epoch, seq, fragment_bytes)


def gen_dtls_flight(issuer: str, flow: FlowKey, fragment_at: Optional[int] = None, *, start_us: int = 0,
                    seed: int = 0, version: bytes = DTLS_1_2, gap_us: int = 1000) -> list[Packet]:
    """A minimal plaintext handshake: ClientHello from the peer, then the
    server flight with a one-certificate Certificate message, then CCS and
    an (opaque) epoch-1 Finished."""
    check_issuer(issuer)
    rng = np.random.default_rng(seed)
    cert_msg = certificate_message([build_certificate(issuer, seed=seed)], message_seq=1)
    if fragment_at is not None and not 0 < fragment_at < cert_msg.total_length:
        raise ValueError(f"fragment_at must be inside (0, {cert_msg.total_length})")
    client_hello = HandshakeMessage(HT_CLIENT_HELLO, 0, b"\xfe\xfd" + rng.bytes(32) + b"\x00\x00\x00\x02\xc0\x2b\x01\x00")
    server_hello = HandshakeMessage(HT_SERVER_HELLO, 0, b"\xfe\xfd" + rng.bytes(32) + b"\x00\xc0\x2b\x00")
    done = HandshakeMessage(HT_SERVER_HELLO_DONE, 2, b"")

    rseq = iter(range(1 << 16))
    datagrams: list[tuple[FlowKey, bytes]] = []
    datagrams.append((flow.reverse(), handshake_record(client_hello.fragment()[0].to_bytes(), 0, version=version).to_bytes()))
    frags = cert_msg.fragment(fragment_at)
    first = handshake_record(server_hello.fragment()[0].to_bytes(), next(rseq), version=version).to_bytes()
    first += handshake_record(frags[0].to_bytes(), next(rseq), version=version).to_bytes()
    datagrams.append((flow, first))
    for frag in frags[1:]:
        datagrams.append((flow, handshake_record(frag.to_bytes(), next(rseq), version=version).to_bytes()))
    tail = handshake_record(done.fragment()[0].to_bytes(), next(rseq), version=version).to_bytes()
    tail += DtlsRecord(CHANGE_CIPHER_SPEC, version, 0, next(rseq), b"\x01").to_bytes()
    tail += DtlsRecord(HANDSHAKE, version, 1, 0, rng.bytes(40)).to_bytes()
    datagrams.append((flow, tail))
    return [udp_packet(start_us + i * gap_us, f, d, i) for i, (f, d) in enumerate(datagrams)]


def gen_app_data(flow: FlowKey, count: int, *, size: int = 200, start_us: int = 0, interval_us: int = 10_000,
                 seed: int = 0, version: bytes = DTLS_1_2, first_seq: int = 1) -> list[Packet]:
    """Data-channel traffic: one epoch-1 application_data record per datagram."""
    rng = np.random.default_rng(seed)
    return [
        udp_packet(start_us + i * interval_us, flow,
                   DtlsRecord(APPLICATION_DATA, version, 1, first_seq + i, rng.bytes(size)).to_bytes(), i)
        for i in range(count)
    ]


def gen_tls_tcp(flow: FlowKey, count: int, *, size: int = 300, start_us: int = 0, interval_us: int = 10_000,
                seed: int = 0) -> list[Packet]:
    """Plain TLS application records over TCP (a non-UDP foil)."""
    rng = np.random.default_rng(seed)
    out, seq = [], 1
    for i in range(count):
        body = b"\x17\x03\x03" + struct.pack("!H", size) + rng.bytes(size)
        out.append(tcp_packet(start_us + i * interval_us, flow, body, seq, i))
        seq += len(body)
    return out


# --- video sources ---------------------------------------------------------


@dataclass(frozen=True)
class ResolutionProfile:
    name: str
    mean_frame_bytes: int
    frame_bytes_stdev: int
    fps: float = 24.0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.mean_frame_bytes <= 0 or self.fps <= 0 or self.frame_bytes_stdev < 0:
            raise ValueError(f"invalid profile {self.name}")


# 1080p mean frame size: 151.0 KB/s at 24 fps, rounded to 6300 bytes.
BASE_THROUGHPUT_BYTES_PER_S = 151_000
BASE_FPS = 24.0
BASE_MEAN_FRAME_BYTES = 6300
STDEV_FRACTION = 0.2

_RESOLUTIONS = (("1080p", 1920, 1080), ("720p", 1280, 720), ("540p", 960, 540),
                ("360p", 640, 360), ("240p", 426, 240), ("180p", 320, 180))


def default_profiles() -> list[ResolutionProfile]:
    """Ladder from 1080p down, mean frame size scaled by pixel count."""
    base_pixels = 1920 * 1080
    out = []
    for name, w, h in _RESOLUTIONS:
        mean = round(BASE_MEAN_FRAME_BYTES * w * h / base_pixels)
        out.append(ResolutionProfile(name, mean, round(mean * STDEV_FRACTION), BASE_FPS, w, h))
    return out


def profile(name: str, profiles: Optional[Sequence[ResolutionProfile]] = None) -> ResolutionProfile:
    for p in profiles or default_profiles():
        if p.name == name:
            return p
    raise KeyError(f"unknown resolution profile {name!r}")


@dataclass(frozen=True)
class Adaptive:
    ladder: tuple
    downshift_loss_threshold: float = 0.10
    window_s: float = 2.0
    upshift_clean_windows: int = 2

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(self.ladder))
        if len(self.ladder) < 2:
            raise ValueError("adaptive ladder needs at least two rungs")
        if not 0 < self.downshift_loss_threshold < 1:
            raise ValueError("downshift_loss_threshold must be in (0, 1)")
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")
        sizes = [p.mean_frame_bytes for p in self.ladder]
        if sizes != sorted(sizes, reverse=True):
            raise ValueError("ladder must be ordered by mean_frame_bytes descending")


@dataclass(frozen=True)
class NonAdaptive:
    profile: ResolutionProfile
    window_s: float = 2.0


SourceModel = Union[Adaptive, NonAdaptive]


def default_adaptive() -> Adaptive:
    return Adaptive((profile("1080p"), profile("540p")))


def default_non_adaptive() -> NonAdaptive:
    return NonAdaptive(profile("1080p"))


@dataclass(frozen=True)
class StreamSpec:
    flow: FlowKey = FlowKey.of("10.0.0.1", 40000, "10.0.0.2", 50000)
    ssrc: int = 0x1234ABCD
    payload_type: int = 102
    mtu_payload_bytes: int = 1200
    duration_s: float = 10.0
    seed: int = 0
    start_us: int = 0
    packet_spacing_us: int = 50
    keyframe_interval: int = 0
    keyframe_scale: float = 1.0

    def __post_init__(self):
        if self.mtu_payload_bytes < 64:
            raise ValueError("mtu_payload_bytes must be at least 64")
        if not 0 <= self.payload_type <= 127:
            raise ValueError("payload_type is 7 bits")
        if self.duration_s < 0:
            raise ValueError("duration_s must be non-negative")


@dataclass(frozen=True)
class FrameTruth:
    ordinal: int
    rtp_timestamp: int
    size: int
    first_packet: int
    packet_count: int
    profile: str
    window: int


@dataclass
class GeneratedStream:
    packets: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    # Active profile name per feedback window.
    profiles: list = field(default_factory=list)
    feedback: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)


LossFeedback = Callable[[int, list], float]


def _frame_size(rng: np.random.Generator, prof: ResolutionProfile, scale: float) -> int:
    mean = prof.mean_frame_bytes * scale
    sd = prof.frame_bytes_stdev * scale
    while True:
        size = int(round(rng.normal(mean, sd))) if sd > 0 else int(round(mean))
        if size >= 1:
            return size


def gen_video_stream(model: SourceModel, spec: StreamSpec = StreamSpec(),
                     loss_feedback: Optional[LossFeedback] = None) -> GeneratedStream:
    """Generate an RTP video stream; adaptive models consult ``loss_feedback``
    (window index, that window's packets) -> observed frame-loss fraction."""
    rng = np.random.default_rng(spec.seed)
    ts0 = int(rng.integers(0, 1 << 32))
    seq = int(rng.integers(0, 1 << 16))
    ladder = model.ladder if isinstance(model, Adaptive) else (model.profile,)
    rung = 0
    clean = 0
    out = GeneratedStream()
    end_us = spec.start_us + round(spec.duration_s * 1e6)
    window_us = round(model.window_s * 1e6)
    t = 0.0  # seconds since start
    frame_no = 0
    window = 0
    window_start_pkt = 0
    out.profiles.append(ladder[rung].name)
    while True:
        now_us = spec.start_us + round(t * 1e6)
        if now_us >= end_us:
            break
        while now_us >= spec.start_us + (window + 1) * window_us:
            window_pkts = out.packets[window_start_pkt:]
            window_start_pkt = len(out.packets)
            if isinstance(model, Adaptive) and loss_feedback is not None:
                loss = float(loss_feedback(window, window_pkts))
                out.feedback.append(loss)
                if loss >= model.downshift_loss_threshold:
                    clean = 0
                    rung = min(rung + 1, len(ladder) - 1)
                else:
                    clean += 1
                    if clean >= model.upshift_clean_windows:
                        clean = 0
                        rung = max(rung - 1, 0)
            window += 1
            out.profiles.append(ladder[rung].name)
        prof = ladder[rung]
        scale = spec.keyframe_scale if spec.keyframe_interval and frame_no % spec.keyframe_interval == 0 else 1.0
        size = _frame_size(rng, prof, scale)
        npk = math.ceil(size / spec.mtu_payload_bytes)
        rtp_ts = (ts0 + round(t * RTP_CLOCK_HZ)) & 0xFFFFFFFF
        body = rng.bytes(size)
        first = len(out.packets)
        for i in range(npk):
            chunk = body[i * spec.mtu_payload_bytes : (i + 1) * spec.mtu_payload_bytes]
            payload = emit_rtp(payload_type=spec.payload_type, sequence_number=seq, timestamp=rtp_ts,
                               ssrc=spec.ssrc, marker=(i == npk - 1), body=chunk)
            seq = (seq + 1) & 0xFFFF
            idx = len(out.packets)
            out.packets.append(udp_packet(now_us + i * spec.packet_spacing_us, spec.flow, payload, idx))
        out.frames.append(FrameTruth(frame_no, rtp_ts, size, first, npk, prof.name, window))
        frame_no += 1
        t += 1.0 / prof.fps
    return out


def gen_audio_stream(spec: StreamSpec = StreamSpec(payload_type=111), *, interval_ms: int = 20,
                     size: int = 160) -> list[Packet]:
    """Constant small-packet audio foil; every packet is its own frame."""
    rng = np.random.default_rng(spec.seed ^ 0xA0D10)
    ts0 = int(rng.integers(0, 1 << 32))
    seq = int(rng.integers(0, 1 << 16))
    count = int(spec.duration_s * 1000 // interval_ms)
    out = []
    for i in range(count):
        payload = emit_rtp(payload_type=spec.payload_type, sequence_number=seq + i, timestamp=ts0 + i * 960,
                           ssrc=spec.ssrc, marker=(i == 0), body=rng.bytes(size))
        out.append(udp_packet(spec.start_us + i * interval_ms * 1000, spec.flow, payload, i))
    return out


# --- composite fixtures ----------------------------------------------------


def snowflake_fixture(seed: int = 0, duration_s: float = 5.0, app_data_packets: int = 200,
                      issuer: str = "WebRTC", fragment_at: Optional[int] = None, audio: bool = False) -> Trace:
    """A WebRTC session carrying a data channel (application_data both ways)
    and SRTP video on the same 4-tuple, plus an unrelated DTLS flow whose
    certificate issuer does not match."""
    webrtc = FlowKey.of("192.168.1.10", 50000, "203.0.113.5", 3478)
    other = FlowKey.of("192.168.1.10", 50001, "198.51.100.7", 4433)
    flight = gen_dtls_flight(issuer, webrtc, fragment_at, seed=seed)
    other_flight = gen_dtls_flight("Example CA", other, seed=seed + 1, start_us=500)
    start = 20_000
    interval = max(1, round(duration_s * 1e6 / max(1, app_data_packets)))
    half = app_data_packets // 2
    data_out = gen_app_data(webrtc, app_data_packets - half, start_us=start, interval_us=interval, seed=seed + 2)
    data_in = gen_app_data(webrtc.reverse(), half, start_us=start + interval // 2, interval_us=interval,
                           seed=seed + 3)
    data_other = gen_app_data(other, app_data_packets, start_us=start + 100, interval_us=interval, seed=seed + 4)
    video = gen_video_stream(default_non_adaptive(),
                             StreamSpec(flow=webrtc, duration_s=duration_s, seed=seed + 5, start_us=start + 7))
    streams = [flight, other_flight, data_out, data_in, data_other, video.packets]
    if audio:
        streams.append(gen_audio_stream(StreamSpec(flow=webrtc, ssrc=0xA0D10001, payload_type=111,
                                                   duration_s=duration_s, seed=seed + 6, start_us=start + 3)))
    return merge(*streams)


def gen_stress_trace(flows: int = 1000, packets: int = 100_000, *, ssrcs_per_flow: int = 16, seed: int = 0,
                     with_handshakes: bool = True) -> Trace:
    """Many concurrent WebRTC-like flows: a DTLS flight each, then short RTP
    frames spread over more SSRCs than the censor has slots for."""
    rng = np.random.default_rng(seed)
    streams = []
    for f in range(flows):
        flow = FlowKey.of(f"10.{(f >> 8) & 0xFF}.{f & 0xFF}.1", 20000 + f % 30000, "172.16.0.1", 3478)
        if with_handshakes:
            streams.append(gen_dtls_flight("WebRTC", flow, seed=seed + f, start_us=f))
    used = sum(len(s) for s in streams)
    per_flow = max(1, (packets - used) // flows)
    for f in range(flows):
        flow = FlowKey.of(f"10.{(f >> 8) & 0xFF}.{f & 0xFF}.1", 20000 + f % 30000, "172.16.0.1", 3478)
        out = []
        ssrc_base = int(rng.integers(1, 1 << 28))
        seqs = [0] * ssrcs_per_flow
        t = 10_000 + f
        n = per_flow if f < flows - 1 else packets - used - per_flow * (flows - 1)
        while len(out) < n:
            s = int(rng.integers(0, ssrcs_per_flow))
            pt = (102, 77, 111)[s % 3]
            frame_len = min(int(rng.integers(1, 5)), n - len(out))
            ts = int(rng.integers(0, 1 << 32))
            for i in range(frame_len):
                payload = emit_rtp(payload_type=pt, sequence_number=seqs[s], timestamp=ts, ssrc=ssrc_base + s,
                                   marker=(i == frame_len - 1), body=rng.bytes(100))
                seqs[s] += 1
                out.append(udp_packet(t, flow, payload))
                t += 1000
        streams.append(out)
    return merge(*streams)
