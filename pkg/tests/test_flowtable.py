import json

import pytest
from hypothesis import given, strategies as st

from diffdeg.core import FlowKey
from diffdeg.dtls import CertificateInfo
from diffdeg.flowtable import (EVICTED_RING, FlowRng, FlowState, FlowTable, PeriodicCounter, lookup,
                               observe_dtls)

A2B = FlowKey.of("10.0.0.1", 5000, "10.0.0.2", 6000)
WEBRTC = CertificateInfo("WebRTC", b"")


def test_flag_sets_both_directions():
    t = observe_dtls(A2B, WEBRTC, FlowTable(), 10)
    assert lookup(A2B, t).webrtc_flagged
    assert lookup(A2B.reverse(), t).webrtc_flagged


def test_non_matching_issuer_does_not_flag():
    t = observe_dtls(A2B, CertificateInfo("Example CA", b""), FlowTable())
    assert lookup(A2B, t) is None


def test_second_observation_keeps_first_timestamp():
    t = FlowTable()
    observe_dtls(A2B, WEBRTC, t, 10)
    observe_dtls(A2B.reverse(), WEBRTC, t, 99)
    assert lookup(A2B, t).flagged_at == 10
    assert lookup(A2B.reverse(), t).flagged_at == 10


def test_substring_mode():
    t = FlowTable()
    assert not t.observe_dtls(A2B, CertificateInfo("WebRTC Inc", b""), 0)
    assert t.observe_dtls(A2B, CertificateInfo("WebRTC Inc", b""), 0, mode="substring")


def test_unknown_flow_is_absent():
    assert lookup(A2B, FlowTable()) is None


def test_lookup_does_not_create():
    t = FlowTable()
    t.lookup(A2B)
    assert len(t) == 0


def test_least_recently_active_flow_is_evicted():
    t = FlowTable(capacity=3)
    keys = [FlowKey.of("10.0.0.1", 1000 + i, "10.0.0.2", 2000) for i in range(4)]
    for k in keys[:3]:
        t.get_or_create(k)
    t.get_or_create(keys[0])  # keys[1] is now the oldest
    t.get_or_create(keys[3])
    assert lookup(keys[1], t) is None
    assert all(lookup(k, t) is not None for k in (keys[0], keys[2], keys[3]))
    assert t.evictions == 1


def test_dump_json_lists_flagged_flows():
    t = observe_dtls(A2B, WEBRTC, FlowTable(), 5)
    doc = json.loads(t.dump_json())
    assert {f["flow"] for f in doc["flagged_flows"]} == {str(A2B), str(A2B.reverse())}


def test_rng_state_is_fixed_size_and_deterministic():
    a, b = FlowRng(42), FlowRng(42)
    assert [a.random() for _ in range(5)] == [b.random() for _ in range(5)]
    assert len(a.to_bytes()) == 37


def test_periodic_counter_hits_exact_rate():
    c = PeriodicCounter()
    hits = sum(c.step(0.25) for _ in range(400))
    assert hits == 100


def test_ssrc_slots_are_bounded_and_lru():
    st_ = FlowState(slot_capacity=2)
    st_.slot(1)
    st_.slot(2)
    st_.slot(1)
    st_.slot(3)  # evicts 2
    assert list(st_.ssrc_slots) == [1, 3]
    assert st_.slot_evictions == 1


def test_evicted_mid_frame_ssrc_fails_open():
    st_ = FlowState(slot_capacity=1)
    slot, _ = st_.slot(1)
    slot.frames_started = 1  # frame in progress (no marker seen)
    st_.slot(2)
    again, created = st_.slot(1)
    assert created and again.fail_open


def test_evicted_ring_is_bounded():
    st_ = FlowState(slot_capacity=1)
    for ssrc in range(20):
        s, _ = st_.slot(ssrc)
        s.frames_started = 1
    assert len(st_.evicted_ssrcs) == EVICTED_RING


@given(st.lists(st.integers(0, 2**32 - 1), max_size=200), st.integers(0, 3))
def test_serialized_state_never_exceeds_bound(ssrcs, n_rngs):
    st_ = FlowState(webrtc_flagged=True, flagged_at=123)
    for s in ssrcs:
        slot, _ = st_.slot(s)
        slot.frames_started += 1
        slot.last_timestamp = s
    for i in range(n_rngs):
        st_.policy_state[i] = FlowRng(i)
    assert st_.serialized_size() <= 256
    assert st_.serialized_size() == 11 + 13 * len(st_.ssrc_slots) + 4 * len(st_.evicted_ssrcs) + 37 * n_rngs


def test_account_tracks_maximum():
    t = FlowTable()
    st_ = t.get_or_create(A2B)
    small = t.account(st_)
    for s in range(8):
        st_.slot(s)
    big = t.account(st_)
    assert big > small and t.max_state_bytes == big


def test_capacity_must_be_positive():
    with pytest.raises(ValueError):
        FlowTable(capacity=0)
