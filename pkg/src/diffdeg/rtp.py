"""SRTP/RTP fixed-header parsing and marker-bit frame segmentation."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import FrozenSet, Optional

RTP_VERSION = 2
FIXED_HEADER_LEN = 12
DEFAULT_VIDEO_PTS: FrozenSet[int] = frozenset({102, 77})


class RtpError(ValueError):
    pass


class TruncatedRtpError(RtpError):
    pass


class NotRtpError(RtpError):
    pass


@dataclass(frozen=True)
class RtpHeader:
    version: int
    padding: bool
    extension: bool
    csrc_count: int
    marker: bool
    payload_type: int
    sequence_number: int
    timestamp: int
    ssrc: int
    header_length: int
    payload_length: int
    csrcs: tuple = ()
    extension_profile: int = 0
    extension_data: bytes = b""


def parse_rtp(payload: bytes) -> RtpHeader:
    n = len(payload)
    if n < FIXED_HEADER_LEN:
        raise TruncatedRtpError(f"RTP packet of {n} bytes is shorter than the fixed header")
    b0, b1, seq, ts, ssrc = struct.unpack_from("!BBHII", payload, 0)
    version = b0 >> 6
    if version != RTP_VERSION:
        raise NotRtpError(f"RTP version {version}")
    cc = b0 & 0x0F
    hlen = FIXED_HEADER_LEN + 4 * cc
    if n < hlen:
        raise TruncatedRtpError("CSRC list runs past end of packet")
    csrcs = struct.unpack_from(f"!{cc}I", payload, FIXED_HEADER_LEN) if cc else ()
    ext = bool(b0 & 0x10)
    profile, ext_data = 0, b""
    if ext:
        if n < hlen + 4:
            raise TruncatedRtpError("extension header runs past end of packet")
        profile, words = struct.unpack_from("!HH", payload, hlen)
        if n < hlen + 4 + 4 * words:
            raise TruncatedRtpError("extension body runs past end of packet")
        ext_data = bytes(payload[hlen + 4 : hlen + 4 + 4 * words])
        hlen += 4 + 4 * words
    return RtpHeader(
        version=version,
        padding=bool(b0 & 0x20),
        extension=ext,
        csrc_count=cc,
        marker=bool(b1 & 0x80),
        payload_type=b1 & 0x7F,
        sequence_number=seq,
        timestamp=ts,
        ssrc=ssrc,
        header_length=hlen,
        payload_length=n - hlen,
        csrcs=tuple(csrcs),
        extension_profile=profile,
        extension_data=ext_data,
    )


def emit_rtp(*, payload_type: int, sequence_number: int, timestamp: int, ssrc: int,
             marker: bool = False, csrcs: tuple = (), padding: bool = False,
             extension_profile: Optional[int] = None, extension_data: bytes = b"",
             body: bytes = b"") -> bytes:
    """Serialize an RTP header followed by ``body`` (inverse of parse_rtp)."""
    if len(csrcs) > 15:
        raise ValueError("at most 15 CSRCs")
    if len(extension_data) % 4:
        raise ValueError("extension data must be a whole number of 32-bit words")
    ext = extension_profile is not None
    b0 = (RTP_VERSION << 6) | (0x20 if padding else 0) | (0x10 if ext else 0) | len(csrcs)
    b1 = (0x80 if marker else 0) | (payload_type & 0x7F)
    out = struct.pack("!BBHII", b0, b1, sequence_number & 0xFFFF, timestamp & 0xFFFFFFFF, ssrc & 0xFFFFFFFF)
    if csrcs:
        out += struct.pack(f"!{len(csrcs)}I", *csrcs)
    if ext:
        out += struct.pack("!HH", extension_profile, len(extension_data) // 4) + extension_data
    return out + body


def is_video(header: RtpHeader, pts: FrozenSet[int] = DEFAULT_VIDEO_PTS) -> bool:
    return header.payload_type in pts


class FrameEventKind(enum.Enum):
    START = "FrameStart"
    CONTINUE = "FrameContinue"
    END = "FrameEnd"


@dataclass(frozen=True)
class FrameEvent:
    kind: FrameEventKind
    ssrc: int
    frame_ordinal: int
    # True when this packet opened the frame; a single-packet frame is
    # reported as END with new_frame set.
    new_frame: bool


@dataclass
class SsrcState:
    last_timestamp: int = 0
    saw_marker_last: bool = False
    drop_current_frame: bool = False
    frames_started: int = 0
    fail_open: bool = False

    @property
    def frame_ordinal(self) -> int:
        return self.frames_started - 1

    @property
    def frame_open(self) -> bool:
        return self.frames_started > 0 and not self.saw_marker_last


def frame_event(header: RtpHeader, state: SsrcState, marker_only: bool = False) -> FrameEvent:
    """Advance ``state`` with one video packet and classify it.

    A packet starts a frame when it is the first seen for this SSRC, the
    previous packet carried the marker, or (unless ``marker_only``) its RTP
    timestamp differs from the current frame's.
    """
    starts = (
        state.frames_started == 0
        or state.saw_marker_last
        or (not marker_only and header.timestamp != state.last_timestamp)
    )
    if starts:
        state.frames_started += 1
    state.last_timestamp = header.timestamp
    state.saw_marker_last = header.marker
    if header.marker:
        kind = FrameEventKind.END
    elif starts:
        kind = FrameEventKind.START
    else:
        kind = FrameEventKind.CONTINUE
    return FrameEvent(kind, header.ssrc, state.frame_ordinal, starts)


class FrameAssembler:
    """Unbounded per-SSRC assembler for offline analysis (inspection, detection)."""

    def __init__(self, marker_only: bool = False):
        self.marker_only = marker_only
        self.states: dict[int, SsrcState] = {}

    def push(self, header: RtpHeader) -> FrameEvent:
        state = self.states.setdefault(header.ssrc, SsrcState())
        return frame_event(header, state, self.marker_only)
