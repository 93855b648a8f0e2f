"""Packet model, flow identity, verdicts and first-byte demultiplexing."""

from __future__ import annotations

import enum
import functools
import hashlib
import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100

PROTO_TCP = 6
PROTO_UDP = 17


class ParseError(ValueError):
    """Malformed packet bytes. ``offset`` is where decoding gave up."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class DemuxClass(enum.Enum):
    STUN = "stun"
    DTLS = "dtls"
    RTP = "rtp"
    UNKNOWN = "unknown"


def demux_first_byte(first_byte: int) -> DemuxClass:
    # 16-19 (ZRTP) and 64-79 (TURN channel) are deliberately Unknown.
    if 0 <= first_byte <= 3:
        return DemuxClass.STUN
    if 20 <= first_byte <= 63:
        return DemuxClass.DTLS
    if 128 <= first_byte <= 191:
        return DemuxClass.RTP
    return DemuxClass.UNKNOWN


def demux(payload: bytes) -> DemuxClass:
    if not payload:
        return DemuxClass.UNKNOWN
    return demux_first_byte(payload[0])


@dataclass(frozen=True, order=True)
class FlowKey:
    """Directional transport 4-tuple. ``proto`` separates UDP from TCP flows."""

    src_addr: IPAddress
    src_port: int
    dst_addr: IPAddress
    dst_port: int
    proto: int = PROTO_UDP

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")

    @classmethod
    def of(cls, src: str, sport: int, dst: str, dport: int, proto: int = PROTO_UDP) -> "FlowKey":
        return cls(ipaddress.ip_address(src), sport, ipaddress.ip_address(dst), dport, proto)

    def reverse(self) -> "FlowKey":
        return FlowKey(self.dst_addr, self.dst_port, self.src_addr, self.src_port, self.proto)

    def canonical(self) -> "FlowKey":
        """Direction-independent representative of the flow pair."""
        rev = self.reverse()
        return min(self, rev, key=_sort_key)

    def to_bytes(self) -> bytes:
        return (
            self.src_addr.packed
            + struct.pack("!H", self.src_port)
            + self.dst_addr.packed
            + struct.pack("!HB", self.dst_port, self.proto)
        )

    @functools.cached_property
    def _hash64(self) -> int:
        return int.from_bytes(hashlib.blake2b(self.to_bytes(), digest_size=8).digest(), "big")

    def stable_hash(self) -> int:
        """64-bit hash that does not depend on interpreter hash seeding."""
        return self._hash64

    def __str__(self) -> str:
        return self._label

    @functools.cached_property
    def _label(self) -> str:
        def fmt(addr, port):
            return f"[{addr}]:{port}" if addr.version == 6 else f"{addr}:{port}"

        name = {PROTO_UDP: "udp", PROTO_TCP: "tcp"}.get(self.proto, str(self.proto))
        return f"{name} {fmt(self.src_addr, self.src_port)} -> {fmt(self.dst_addr, self.dst_port)}"


def _sort_key(k: FlowKey):
    return (k.src_addr.version, int(k.src_addr), k.src_port, k.dst_addr.version, int(k.dst_addr), k.dst_port)


class VerdictKind(enum.Enum):
    PASS = "pass"
    DROP = "drop"
    DELAY = "delay"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    delay_ms: int = 0

    def __post_init__(self):
        if self.kind is VerdictKind.DELAY and self.delay_ms <= 0:
            raise ValueError("Delay verdict needs a positive duration")
        if self.kind is not VerdictKind.DELAY and self.delay_ms != 0:
            raise ValueError("only Delay verdicts carry a duration")

    @classmethod
    def delay(cls, ms: int) -> "Verdict":
        return cls(VerdictKind.DELAY, int(ms))

    @property
    def is_drop(self) -> bool:
        return self.kind is VerdictKind.DROP

    def __str__(self) -> str:
        if self.kind is VerdictKind.DELAY:
            return f"Delay({self.delay_ms}ms)"
        return self.kind.value.capitalize()


PASS = Verdict(VerdictKind.PASS)
DROP = Verdict(VerdictKind.DROP)


@dataclass(frozen=True)
class Decoded:
    flow: FlowKey
    payload: bytes
    payload_offset: int


def _decode_transport(data: bytes, off: int, proto: int, src: IPAddress, dst: IPAddress) -> Optional[Decoded]:
    if proto == PROTO_UDP:
        if len(data) - off < 8:
            raise ParseError("truncated UDP header", off)
        sport, dport, ulen = struct.unpack_from("!HHH", data, off)
        if ulen < 8:
            raise ParseError("bad UDP length", off + 4)
        end = min(off + ulen, len(data))
        return Decoded(FlowKey(src, sport, dst, dport, PROTO_UDP), bytes(data[off + 8 : end]), off + 8)
    if proto == PROTO_TCP:
        if len(data) - off < 20:
            raise ParseError("truncated TCP header", off)
        sport, dport = struct.unpack_from("!HH", data, off)
        doff = (data[off + 12] >> 4) * 4
        if doff < 20 or off + doff > len(data):
            raise ParseError("bad TCP data offset", off + 12)
        return Decoded(FlowKey(src, sport, dst, dport, PROTO_TCP), bytes(data[off + doff :]), off + doff)
    return None


def decode_ip(data: bytes, off: int = 0) -> Optional[Decoded]:
    """Decode an IPv4/IPv6 datagram at ``off``. Returns None for non-TCP/UDP."""
    if len(data) - off < 1:
        raise ParseError("empty IP header", off)
    version = data[off] >> 4
    if version == 4:
        if len(data) - off < 20:
            raise ParseError("truncated IPv4 header", off)
        ihl = (data[off] & 0x0F) * 4
        if ihl < 20 or off + ihl > len(data):
            raise ParseError("bad IPv4 header length", off)
        total_len = struct.unpack_from("!H", data, off + 2)[0]
        proto = data[off + 9]
        src = ipaddress.IPv4Address(bytes(data[off + 12 : off + 16]))
        dst = ipaddress.IPv4Address(bytes(data[off + 16 : off + 20]))
        frag = struct.unpack_from("!H", data, off + 6)[0] & 0x1FFF
        if frag:
            return None  # non-first fragment, no transport header
        end = min(off + total_len, len(data)) if total_len >= ihl else len(data)
        return _decode_transport(bytes(data[:end]), off + ihl, proto, src, dst)
    if version == 6:
        if len(data) - off < 40:
            raise ParseError("truncated IPv6 header", off)
        plen = struct.unpack_from("!H", data, off + 4)[0]
        proto = data[off + 6]
        src = ipaddress.IPv6Address(bytes(data[off + 8 : off + 24]))
        dst = ipaddress.IPv6Address(bytes(data[off + 24 : off + 40]))
        end = min(off + 40 + plen, len(data))
        return _decode_transport(bytes(data[:end]), off + 40, proto, src, dst)
    raise ParseError(f"unknown IP version {version}", off)


def decode_frame(frame: bytes, linktype: int = LINKTYPE_ETHERNET) -> Optional[Decoded]:
    """Decode a link-layer frame down to the transport payload.

    Returns None for frames that carry neither TCP nor UDP over IP.
    """
    if linktype == LINKTYPE_RAW:
        return decode_ip(frame, 0)
    if linktype != LINKTYPE_ETHERNET:
        raise ParseError(f"unsupported link type {linktype}", 0)
    if len(frame) < 14:
        raise ParseError("truncated Ethernet header", 0)
    off = 12
    ethertype = struct.unpack_from("!H", frame, off)[0]
    while ethertype == ETHERTYPE_VLAN:
        off += 4
        if len(frame) < off + 2:
            raise ParseError("truncated VLAN tag", off)
        ethertype = struct.unpack_from("!H", frame, off)[0]
    off += 2
    if ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
        return None
    return decode_ip(frame, off)


def flow_key_of(frame: bytes, linktype: int = LINKTYPE_ETHERNET) -> FlowKey:
    """Directional flow key of an IP+UDP (or TCP) frame."""
    decoded = decode_frame(frame, linktype)
    if decoded is None:
        raise ParseError("frame carries no TCP/UDP header", 0)
    return decoded.flow


@dataclass
class Packet:
    """One captured frame plus its decoded transport view.

    ``raw`` is the link-layer frame exactly as captured; ``payload`` is the
    UDP/TCP payload (empty for opaque frames, where ``flow`` is None).
    """

    timestamp_us: int
    raw: bytes
    original_index: int = 0
    orig_len: Optional[int] = None
    flow: Optional[FlowKey] = None
    payload: bytes = b""
    parse_error: Optional[str] = field(default=None, compare=False)

    @property
    def is_udp(self) -> bool:
        return self.flow is not None and self.flow.proto == PROTO_UDP

    @property
    def demux_class(self) -> DemuxClass:
        if not self.is_udp:
            return DemuxClass.UNKNOWN
        return demux(self.payload)

    @property
    def timestamp(self) -> float:
        return self.timestamp_us / 1e6

    @classmethod
    def from_frame(cls, timestamp_us: int, raw: bytes, linktype: int = LINKTYPE_ETHERNET,
                   original_index: int = 0, orig_len: Optional[int] = None) -> "Packet":
        pkt = cls(timestamp_us, bytes(raw), original_index, orig_len)
        try:
            decoded = decode_frame(pkt.raw, linktype)
        except ParseError as exc:
            pkt.parse_error = str(exc)
            return pkt
        if decoded is not None:
            pkt.flow = decoded.flow
            pkt.payload = decoded.payload
        return pkt
