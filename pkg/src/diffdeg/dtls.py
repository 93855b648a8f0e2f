"""Plaintext DTLS record layer, handshake reassembly and certificate issuer extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional

CHANGE_CIPHER_SPEC = 20
ALERT = 21
HANDSHAKE = 22
APPLICATION_DATA = 23

HT_CLIENT_HELLO = 1
HT_SERVER_HELLO = 2
HT_CERTIFICATE = 11
HT_SERVER_HELLO_DONE = 14

RECORD_HEADER_LEN = 13
HANDSHAKE_HEADER_LEN = 12

DTLS_1_0 = b"\xfe\xff"
DTLS_1_2 = b"\xfe\xfd"

OID_COMMON_NAME = b"\x55\x04\x03"  # 2.5.4.3
# DER of the CN attribute type, used by the byte-scan fallback.
CN_PATTERN = b"\x06\x03" + OID_COMMON_NAME
_STRING_TAGS = {0x0C, 0x13, 0x14, 0x16, 0x1E}


class DtlsError(ValueError):
    pass


class TruncatedRecordError(DtlsError):
    """Record header or body runs past the datagram end.

    ``records`` holds every complete record parsed before ``offset``.
    """

    def __init__(self, offset: int, records: list):
        super().__init__(f"truncated DTLS record at offset {offset}")
        self.offset = offset
        self.records = records


class ReassemblyError(DtlsError):
    pass


class NoCertificateError(DtlsError):
    pass


@dataclass(frozen=True)
class DtlsRecord:
    content_type: int
    protocol_version: bytes
    epoch: int
    sequence_number: int
    fragment: bytes

    @property
    def length(self) -> int:
        return len(self.fragment)

    def to_bytes(self) -> bytes:
        return (
            struct.pack("!B2sH", self.content_type, self.protocol_version, self.epoch)
            + self.sequence_number.to_bytes(6, "big")
            + struct.pack("!H", len(self.fragment))
            + self.fragment
        )


def is_application_data(record: DtlsRecord) -> bool:
    return record.content_type == APPLICATION_DATA


def parse_records(datagram: bytes) -> list[DtlsRecord]:
    """Split a datagram into DTLS records.

    Raises TruncatedRecordError (carrying the complete records) when the
    last record is cut short.
    """
    records: list[DtlsRecord] = []
    off = 0
    n = len(datagram)
    while off < n:
        if n - off < RECORD_HEADER_LEN:
            raise TruncatedRecordError(off, records)
        ctype, version, epoch = struct.unpack_from("!B2sH", datagram, off)
        seq = int.from_bytes(datagram[off + 5 : off + 11], "big")
        length = struct.unpack_from("!H", datagram, off + 11)[0]
        body = off + RECORD_HEADER_LEN
        if body + length > n:
            raise TruncatedRecordError(off, records)
        records.append(DtlsRecord(ctype, bytes(version), epoch, seq, bytes(datagram[body : body + length])))
        off = body + length
    return records


def parse_records_lenient(datagram: bytes) -> tuple[list[DtlsRecord], Optional[TruncatedRecordError]]:
    try:
        return parse_records(datagram), None
    except TruncatedRecordError as exc:
        return exc.records, exc


@dataclass(frozen=True)
class HandshakeFragment:
    msg_type: int
    total_length: int
    message_seq: int
    fragment_offset: int
    body: bytes

    @property
    def fragment_length(self) -> int:
        return len(self.body)

    def to_bytes(self) -> bytes:
        return (
            bytes([self.msg_type])
            + self.total_length.to_bytes(3, "big")
            + struct.pack("!H", self.message_seq)
            + self.fragment_offset.to_bytes(3, "big")
            + len(self.body).to_bytes(3, "big")
            + self.body
        )


@dataclass(frozen=True)
class HandshakeMessage:
    msg_type: int
    message_seq: int
    body: bytes

    @property
    def total_length(self) -> int:
        return len(self.body)

    def fragment(self, at: Optional[int] = None) -> list[HandshakeFragment]:
        cuts = [0, len(self.body)] if at is None else [0, at, len(self.body)]
        return [
            HandshakeFragment(self.msg_type, len(self.body), self.message_seq, a, self.body[a:b])
            for a, b in zip(cuts, cuts[1:])
        ]


def parse_handshake_fragments(fragment: bytes) -> list[HandshakeFragment]:
    """Parse the handshake messages packed in one record's fragment."""
    out = []
    off = 0
    while off < len(fragment):
        if len(fragment) - off < HANDSHAKE_HEADER_LEN:
            raise DtlsError(f"truncated handshake header at offset {off}")
        msg_type = fragment[off]
        total = int.from_bytes(fragment[off + 1 : off + 4], "big")
        seq = struct.unpack_from("!H", fragment, off + 4)[0]
        foff = int.from_bytes(fragment[off + 6 : off + 9], "big")
        flen = int.from_bytes(fragment[off + 9 : off + 12], "big")
        start = off + HANDSHAKE_HEADER_LEN
        if start + flen > len(fragment):
            raise DtlsError(f"handshake fragment overruns record at offset {off}")
        if foff + flen > total:
            raise DtlsError(f"fragment [{foff}, {foff + flen}) exceeds total length {total}")
        out.append(HandshakeFragment(msg_type, total, seq, foff, bytes(fragment[start : start + flen])))
        off = start + flen
    return out


class HandshakeReassembler:
    """Per-flow reassembly of the plaintext (epoch 0) handshake flight.

    Once the buffered bytes exceed ``max_buffer`` the flow is marked
    unparseable and every later record is ignored.
    """

    def __init__(self, max_buffer: int = 16 * 1024):
        self.max_buffer = max_buffer
        self.unparseable = False
        self._partial: dict[int, tuple[int, int, bytearray, bytearray]] = {}
        self._done: set[int] = set()
        self._buffered = 0

    def feed(self, record: DtlsRecord) -> list[HandshakeMessage]:
        if self.unparseable or record.content_type != HANDSHAKE or record.epoch != 0:
            return []
        try:
            fragments = parse_handshake_fragments(record.fragment)
        except DtlsError:
            self.unparseable = True
            return []
        complete = []
        for frag in fragments:
            msg = self._add(frag)
            if msg is not None:
                complete.append(msg)
        return complete

    def feed_all(self, records: Iterable[DtlsRecord]) -> list[HandshakeMessage]:
        out = []
        for rec in records:
            out.extend(self.feed(rec))
        return out

    def _add(self, frag: HandshakeFragment) -> Optional[HandshakeMessage]:
        if frag.message_seq in self._done:
            return None
        entry = self._partial.get(frag.message_seq)
        if entry is None:
            if self._buffered + frag.total_length > self.max_buffer:
                self.unparseable = True
                self._partial.clear()
                return None
            entry = (frag.msg_type, frag.total_length, bytearray(frag.total_length), bytearray(frag.total_length))
            self._partial[frag.message_seq] = entry
            self._buffered += frag.total_length
        msg_type, total, buf, have = entry
        if frag.msg_type != msg_type or frag.total_length != total:
            raise ReassemblyError(f"inconsistent header for message_seq {frag.message_seq}")
        a, b = frag.fragment_offset, frag.fragment_offset + frag.fragment_length
        for i in range(a, b):
            if have[i] and buf[i] != frag.body[i - a]:
                raise ReassemblyError(f"overlapping fragment disagrees at byte {i} of message {frag.message_seq}")
        buf[a:b] = frag.body
        have[a:b] = b"\x01" * (b - a)
        if all(have):
            del self._partial[frag.message_seq]
            self._buffered -= total
            self._done.add(frag.message_seq)
            return HandshakeMessage(msg_type, frag.message_seq, bytes(buf))
        return None


def reassemble_handshake(records: Iterable[DtlsRecord], max_buffer: int = 16 * 1024) -> list[HandshakeMessage]:
    return HandshakeReassembler(max_buffer).feed_all(records)


# --- certificates ---------------------------------------------------------


@dataclass(frozen=True)
class CertificateInfo:
    issuer_common_name: str
    raw_issuer_der: bytes
    provenance: str = "parsed"  # or "scanned"


class _DerError(Exception):
    pass


def _der_tlv(data: bytes, off: int) -> tuple[int, int, int]:
    """Return (tag, content_start, content_end) of the TLV at ``off``."""
    if off + 2 > len(data):
        raise _DerError("short TLV")
    tag = data[off]
    if tag & 0x1F == 0x1F:
        raise _DerError("high tag numbers unsupported")
    first = data[off + 1]
    pos = off + 2
    if first < 0x80:
        length = first
    else:
        nbytes = first & 0x7F
        if nbytes == 0 or nbytes > 4 or pos + nbytes > len(data):
            raise _DerError("unsupported length encoding")
        length = int.from_bytes(data[pos : pos + nbytes], "big")
        pos += nbytes
    if pos + length > len(data):
        raise _DerError("TLV overruns buffer")
    return tag, pos, pos + length


def _decode_string(tag: int, raw: bytes) -> str:
    if tag == 0x1E:
        return raw.decode("utf-16-be")
    if tag == 0x14:
        return raw.decode("latin-1")
    return raw.decode("utf-8")


def _issuer_from_der(cert: bytes) -> CertificateInfo:
    tag, s, e = _der_tlv(cert, 0)
    if tag != 0x30:
        raise _DerError("certificate is not a SEQUENCE")
    tag, s, e = _der_tlv(cert, s)  # tbsCertificate
    if tag != 0x30:
        raise _DerError("tbsCertificate is not a SEQUENCE")
    off = s
    tag, _, end = _der_tlv(cert, off)
    if tag == 0xA0:  # explicit version
        off = end
    for expected in (0x02, 0x30):  # serialNumber, signature AlgorithmIdentifier
        tag, _, end = _der_tlv(cert, off)
        if tag != expected:
            raise _DerError("unexpected field in tbsCertificate")
        off = end
    tag, ns, ne = _der_tlv(cert, off)
    if tag != 0x30:
        raise _DerError("issuer is not a SEQUENCE")
    raw_issuer = bytes(cert[off:ne])
    pos = ns
    while pos < ne:
        tag, ss, se = _der_tlv(cert, pos)  # RelativeDistinguishedName SET
        if tag != 0x31:
            raise _DerError("RDN is not a SET")
        apos = ss
        while apos < se:
            tag, as_, ae = _der_tlv(cert, apos)  # AttributeTypeAndValue
            otag, os_, oe = _der_tlv(cert, as_)
            if otag != 0x06:
                raise _DerError("attribute type is not an OID")
            if cert[os_:oe] == OID_COMMON_NAME:
                vtag, vs, ve = _der_tlv(cert, oe)
                if vtag not in _STRING_TAGS:
                    raise _DerError("CN value is not a string")
                return CertificateInfo(_decode_string(vtag, bytes(cert[vs:ve])), raw_issuer, "parsed")
            apos = ae
        pos = se
    raise _DerError("issuer has no CN")


def scan_issuer(body: bytes, pattern: bytes = CN_PATTERN) -> Optional[CertificateInfo]:
    """Cheap fallback: first string value following ``pattern`` anywhere in ``body``."""
    idx = body.find(pattern)
    while idx >= 0:
        pos = idx + len(pattern)
        if pos + 2 <= len(body) and body[pos] in _STRING_TAGS:
            length = body[pos + 1]
            if length < 0x80 and pos + 2 + length <= len(body):
                try:
                    text = _decode_string(body[pos], bytes(body[pos + 2 : pos + 2 + length]))
                except UnicodeDecodeError:
                    text = None
                if text is not None:
                    return CertificateInfo(text, b"", "scanned")
        idx = body.find(pattern, idx + 1)
    return None


def certificate_list(body: bytes) -> list[bytes]:
    if len(body) < 3:
        raise DtlsError("certificate message too short")
    total = int.from_bytes(body[:3], "big")
    if total == 0:
        raise NoCertificateError("empty certificate list")
    certs = []
    off = 3
    end = min(3 + total, len(body))
    while off + 3 <= end:
        n = int.from_bytes(body[off : off + 3], "big")
        certs.append(bytes(body[off + 3 : off + 3 + n]))
        off += 3 + n
    if not certs:
        raise NoCertificateError("empty certificate list")
    return certs


def extract_issuer(message: HandshakeMessage, scan_pattern: bytes = CN_PATTERN,
                   all_certificates: bool = False) -> CertificateInfo:
    """Issuer CN of the first certificate (or of the first parseable one when
    ``all_certificates`` is set); falls back to a byte scan of the body."""
    if message.msg_type != HT_CERTIFICATE:
        raise DtlsError(f"not a Certificate message (type {message.msg_type})")
    certs = certificate_list(message.body)
    for cert in certs if all_certificates else certs[:1]:
        try:
            return _issuer_from_der(cert)
        except (_DerError, UnicodeDecodeError):
            continue
    found = scan_issuer(message.body, scan_pattern)
    if found is None:
        raise DtlsError("no issuer CN found")
    return found
