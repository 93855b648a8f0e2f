import struct

import pytest
from cryptography import x509
from cryptography.x509.oid import NameOID
from hypothesis import given, settings, strategies as st

from diffdeg.dtls import (APPLICATION_DATA, CHANGE_CIPHER_SPEC, DTLS_1_2, HANDSHAKE, HT_CERTIFICATE,
                          DtlsRecord, HandshakeMessage, HandshakeReassembler, NoCertificateError,
                          ReassemblyError, TruncatedRecordError, extract_issuer, is_application_data,
                          parse_handshake_fragments, parse_records, parse_records_lenient,
                          reassemble_handshake, scan_issuer)
from diffdeg.synth import (build_certificate, certificate_message, check_issuer, gen_dtls_flight,
                           handshake_record)
from diffdeg.core import FlowKey

FLOW = FlowKey.of("10.0.0.1", 5000, "10.0.0.2", 6000)


def _record(ct, body, seq=0, epoch=0):
    return struct.pack("!B2sH6sH", ct, DTLS_1_2, epoch, seq.to_bytes(6, "big"), len(body)) + body


def test_single_application_data_record():
    recs = parse_records(_record(23, b"abcde", seq=7, epoch=1))
    assert len(recs) == 1
    r = recs[0]
    assert (r.content_type, r.epoch, r.sequence_number, r.length) == (23, 1, 7, 5)
    assert r.protocol_version == DTLS_1_2


def test_two_records_keep_order():
    recs = parse_records(_record(22, b"\x00" * 12) + _record(23, b"zz"))
    assert [r.content_type for r in recs] == [22, 23]


def test_short_datagram_is_truncated():
    with pytest.raises(TruncatedRecordError) as exc:
        parse_records(b"\x17" * 10)
    assert exc.value.offset == 0


def test_truncation_after_a_good_record_keeps_what_parsed():
    data = _record(22, b"ok") + _record(23, b"abcdef")[:-2]
    recs, err = parse_records_lenient(data)
    assert [r.content_type for r in recs] == [22]
    assert err is not None and err.offset == 15


@pytest.mark.parametrize("ct, expected", [(23, True), (22, False), (20, False)])
def test_is_application_data(ct, expected):
    assert is_application_data(DtlsRecord(ct, DTLS_1_2, 0, 0, b"")) is expected


@given(st.integers(20, 63), st.integers(0, 0xFFFF), st.integers(0, 2**48 - 1), st.binary(max_size=300))
def test_record_round_trip(ct, epoch, seq, body):
    rec = DtlsRecord(ct, DTLS_1_2, epoch, seq, body)
    assert parse_records(rec.to_bytes()) == [rec]


def _cert_msg(issuer="WebRTC"):
    return certificate_message([build_certificate(issuer)], message_seq=1)


def test_unfragmented_certificate_reassembles():
    msg = _cert_msg()
    rec = handshake_record(msg.fragment()[0].to_bytes(), 0)
    out = reassemble_handshake([rec])
    assert len(out) == 1
    assert out[0].msg_type == HT_CERTIFICATE
    assert out[0].body == msg.body


def test_two_fragments_reassemble_to_total_length():
    msg = _cert_msg()
    frags = msg.fragment(100)
    assert [f.fragment_offset for f in frags] == [0, 100]
    recs = [handshake_record(f.to_bytes(), i) for i, f in enumerate(frags)]
    out = reassemble_handshake(recs)
    assert len(out) == 1 and out[0].body == msg.body
    assert len(out[0].body) == msg.total_length


def test_duplicate_fragment_is_idempotent():
    msg = _cert_msg()
    frags = msg.fragment(100)
    recs = [handshake_record(f.to_bytes(), i) for i, f in enumerate(frags)]
    once = reassemble_handshake(recs)
    twice = reassemble_handshake([recs[0], recs[0], recs[1], recs[1]])
    assert once == twice


@settings(max_examples=60)
@given(st.data())
def test_reassembly_is_order_and_duplication_invariant(data):
    msg = _cert_msg()
    cuts = sorted(data.draw(st.sets(st.integers(1, msg.total_length - 1), max_size=6)))
    bounds = [0, *cuts, msg.total_length]
    frags = []
    for lo, hi in zip(bounds, bounds[1:]):
        frags.append(struct.pack("!B3sH3s3s", msg.msg_type, msg.total_length.to_bytes(3, "big"), msg.message_seq,
                                 lo.to_bytes(3, "big"), (hi - lo).to_bytes(3, "big")) + msg.body[lo:hi])
    order = data.draw(st.permutations(range(len(frags))))
    dups = data.draw(st.lists(st.sampled_from(range(len(frags))), max_size=4))
    seq = [frags[i] for i in list(order) + dups]
    recs = [handshake_record(f, i) for i, f in enumerate(seq)]
    out = reassemble_handshake(recs)
    assert len(out) == 1 and out[0].body == msg.body


def test_conflicting_overlap_is_rejected():
    msg = _cert_msg()
    a, b = msg.fragment(100)
    bad = struct.pack("!B3sH3s3s", msg.msg_type, msg.total_length.to_bytes(3, "big"), 1,
                      (90).to_bytes(3, "big"), (20).to_bytes(3, "big")) + bytes(20)
    r = HandshakeReassembler()
    r.feed(handshake_record(a.to_bytes(), 0))
    with pytest.raises(ReassemblyError):
        r.feed(handshake_record(bad, 1))


def test_buffer_bound_marks_flow_unparseable():
    msg = HandshakeMessage(HT_CERTIFICATE, 1, bytes(5000))
    r = HandshakeReassembler(max_buffer=1000)
    out = r.feed(handshake_record(msg.fragment(100)[0].to_bytes(), 0))
    assert out == [] and r.unparseable


def test_encrypted_epoch_is_ignored():
    msg = _cert_msg()
    rec = handshake_record(msg.fragment()[0].to_bytes(), 0, epoch=1)
    assert reassemble_handshake([rec]) == []


@pytest.mark.parametrize("issuer", ["WebRTC", "Example CA"])
def test_extract_issuer(issuer):
    info = extract_issuer(_cert_msg(issuer))
    assert info.issuer_common_name == issuer
    assert info.provenance == "parsed"


def test_empty_certificate_list():
    with pytest.raises(NoCertificateError):
        extract_issuer(HandshakeMessage(HT_CERTIFICATE, 1, b"\x00\x00\x00"))


def test_scan_fallback_on_undecodable_der():
    cert = bytearray(build_certificate("WebRTC"))
    cert[1] = 0x85  # invalid length-of-length
    body = len(cert).to_bytes(3, "big")
    body = (len(cert) + 3).to_bytes(3, "big") + body + bytes(cert)
    info = extract_issuer(HandshakeMessage(HT_CERTIFICATE, 1, body))
    assert info.issuer_common_name == "WebRTC"
    assert info.provenance == "scanned"
    assert scan_issuer(b"nothing here") is None


printable = st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=64)


@settings(max_examples=80)
@given(printable)
def test_issuer_round_trip_and_independent_parse(issuer):
    der = build_certificate(issuer)
    assert extract_issuer(certificate_message([der])).issuer_common_name == issuer
    cert = x509.load_der_x509_certificate(der)
    assert cert.issuer.get_attributes_for_oid(NameOID.COMMON_NAME)[0].value == issuer


def test_issuer_bound():
    check_issuer("x" * 64)
    with pytest.raises(ValueError):
        check_issuer("x" * 65)


def test_flight_from_generator():
    flight = gen_dtls_flight("WebRTC", FLOW)
    r = HandshakeReassembler()
    msgs = []
    for pkt in flight:
        if pkt.flow == FLOW:
            msgs += r.feed_all(parse_records(pkt.payload))
    certs = [m for m in msgs if m.msg_type == HT_CERTIFICATE]
    assert extract_issuer(certs[0]).issuer_common_name == "WebRTC"
    # ClientHello travels the reverse direction.
    assert flight[0].flow == FLOW.reverse()


def test_flight_fragment_at_40():
    whole = gen_dtls_flight("X", FLOW)
    split = gen_dtls_flight("X", FLOW, fragment_at=40)
    frags = [f for p in split if p.flow == FLOW for r in parse_records(p.payload)
             if r.content_type == HANDSHAKE and r.epoch == 0
             for f in parse_handshake_fragments(r.fragment) if f.msg_type == HT_CERTIFICATE]
    assert [f.fragment_offset for f in frags] == [0, 40]
    joined = b"".join(f.body for f in frags)
    whole_cert = [f for p in whole if p.flow == FLOW for r in parse_records(p.payload)
                  if r.content_type == HANDSHAKE and r.epoch == 0
                  for f in parse_handshake_fragments(r.fragment) if f.msg_type == HT_CERTIFICATE]
    assert joined == whole_cert[0].body


def test_flight_tail_has_ccs_and_encrypted_record():
    tail = parse_records(gen_dtls_flight("WebRTC", FLOW)[-1].payload)
    assert [r.content_type for r in tail][-2:] == [CHANGE_CIPHER_SPEC, HANDSHAKE]
    assert tail[-1].epoch == 1
    assert not any(r.content_type == APPLICATION_DATA for r in tail)
