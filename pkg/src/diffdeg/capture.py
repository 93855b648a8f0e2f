"""Classic (libpcap) capture files, microsecond resolution."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Union

from .core import LINKTYPE_ETHERNET, LINKTYPE_RAW, Packet

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
SUPPORTED_LINKTYPES = (LINKTYPE_ETHERNET, LINKTYPE_RAW)

PathLike = Union[str, os.PathLike]


class CaptureError(ValueError):
    pass


class UnsupportedFormatError(CaptureError):
    pass


class TruncatedCaptureError(CaptureError):
    def __init__(self, ordinal: int, message: str = "truncated packet record"):
        super().__init__(f"{message} #{ordinal}")
        self.ordinal = ordinal


@dataclass
class Trace:
    packets: list = field(default_factory=list)
    linktype: int = LINKTYPE_ETHERNET
    byte_order: str = "<"
    snaplen: int = 65535
    version: tuple = (2, 4)
    thiszone: int = 0
    sigfigs: int = 0

    def __len__(self) -> int:
        return len(self.packets)

    def __iter__(self):
        return iter(self.packets)

    def __getitem__(self, i):
        return self.packets[i]

    def like(self, packets) -> "Trace":
        """A trace with this trace's file metadata and different packets."""
        return Trace(list(packets), self.linktype, self.byte_order, self.snaplen, self.version,
                     self.thiszone, self.sigfigs)

    def normalized(self) -> "Trace":
        """Stable sort by timestamp; ties keep capture order."""
        return self.like(sorted(self.packets, key=lambda p: (p.timestamp_us, p.original_index)))


def parse_capture(data: bytes) -> Trace:
    if len(data) < 24:
        raise UnsupportedFormatError("file shorter than a capture header")
    for order in ("<", ">"):
        magic = struct.unpack_from(order + "I", data, 0)[0]
        if magic == MAGIC_USEC:
            break
        if magic == MAGIC_NSEC:
            raise UnsupportedFormatError("nanosecond-resolution captures are not supported")
    else:
        raise UnsupportedFormatError(f"bad magic 0x{struct.unpack_from('<I', data, 0)[0]:08x}")
    vmaj, vmin, thiszone, sigfigs, snaplen, linktype = struct.unpack_from(order + "HHiIII", data, 4)
    if linktype not in SUPPORTED_LINKTYPES:
        raise UnsupportedFormatError(f"unsupported link type {linktype}")
    trace = Trace([], linktype, order, snaplen, (vmaj, vmin), thiszone, sigfigs)
    rec = struct.Struct(order + "IIII")
    off = 24
    ordinal = 0
    keys: dict = {}
    while off < len(data):
        if len(data) - off < rec.size:
            raise TruncatedCaptureError(ordinal, "truncated record header")
        sec, usec, incl, orig = rec.unpack_from(data, off)
        off += rec.size
        if len(data) - off < incl:
            raise TruncatedCaptureError(ordinal)
        if usec >= 1_000_000:
            raise CaptureError(f"record #{ordinal}: microseconds field {usec} out of range")
        pkt = Packet.from_frame(sec * 1_000_000 + usec, data[off : off + incl], linktype, ordinal, orig)
        if pkt.flow is not None:
            pkt.flow = keys.setdefault(pkt.flow, pkt.flow)
        trace.packets.append(pkt)
        off += incl
        ordinal += 1
    return trace


def read_capture(path: PathLike) -> Trace:
    with open(path, "rb") as fh:
        return parse_capture(fh.read())


def serialize_capture(trace: Trace) -> bytes:
    order = trace.byte_order
    out = [struct.pack(order + "IHHiIII", MAGIC_USEC, trace.version[0], trace.version[1], trace.thiszone,
                       trace.sigfigs, trace.snaplen, trace.linktype)]
    rec = struct.Struct(order + "IIII")
    for pkt in trace.packets:
        if pkt.timestamp_us < 0:
            raise CaptureError("negative timestamp")
        sec, usec = divmod(pkt.timestamp_us, 1_000_000)
        orig = pkt.orig_len if pkt.orig_len is not None else len(pkt.raw)
        out.append(rec.pack(sec, usec, len(pkt.raw), orig))
        out.append(pkt.raw)
    return b"".join(out)


def write_capture(trace: Trace, path: PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_capture(trace))
