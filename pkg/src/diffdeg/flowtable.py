"""The censor's bounded per-flow memory."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import FlowKey
from .dtls import CertificateInfo
from .rtp import SsrcState

DEFAULT_SSRC_SLOTS = 8
DEFAULT_STATE_BOUND = 256
EVICTED_RING = 4

_SLOT = struct.Struct("!IIBI")  # ssrc, last_timestamp, flags, frames_started


class FlowRng:
    """Seeded per-flow generator with a fixed 37-byte serialized state."""

    __slots__ = ("gen",)

    def __init__(self, seed: int):
        self.gen = np.random.Generator(np.random.PCG64(seed & 0xFFFFFFFFFFFFFFFF))

    def random(self) -> float:
        return float(self.gen.random())

    def to_bytes(self) -> bytes:
        st = self.gen.bit_generator.state
        return (
            st["state"]["state"].to_bytes(16, "big")
            + st["state"]["inc"].to_bytes(16, "big")
            + struct.pack("!BI", st["has_uint32"], st["uinteger"])
        )


class PeriodicCounter:
    """Deterministic exact-rate schedule: an accumulator in [0, 1)."""

    __slots__ = ("acc",)

    def __init__(self, phase: float = 0.0):
        self.acc = phase

    def step(self, rate: float) -> bool:
        self.acc += rate
        if self.acc >= 1.0 - 1e-12:
            self.acc -= 1.0
            return True
        return False

    def to_bytes(self) -> bytes:
        return struct.pack("!d", self.acc)


@dataclass
class FlowState:
    webrtc_flagged: bool = False
    flagged_at: Optional[int] = None  # microseconds
    ssrc_slots: "OrderedDict[int, SsrcState]" = field(default_factory=OrderedDict)
    evicted_ssrcs: deque = field(default_factory=lambda: deque(maxlen=EVICTED_RING))
    policy_state: dict = field(default_factory=dict)
    slot_capacity: int = DEFAULT_SSRC_SLOTS
    slot_evictions: int = 0

    def slot(self, ssrc: int) -> tuple[SsrcState, bool]:
        """Return the slot for ``ssrc`` (LRU-touched) and whether it was just created."""
        st = self.ssrc_slots.get(ssrc)
        if st is not None:
            self.ssrc_slots.move_to_end(ssrc)
            return st, False
        if len(self.ssrc_slots) >= self.slot_capacity:
            old_ssrc, old = self.ssrc_slots.popitem(last=False)
            self.slot_evictions += 1
            if old.frame_open:
                self.evicted_ssrcs.append(old_ssrc)
        st = SsrcState()
        if ssrc in self.evicted_ssrcs:
            # Rest of an evicted frame: never drop it (fail open).
            self.evicted_ssrcs.remove(ssrc)
            st.fail_open = True
        self.ssrc_slots[ssrc] = st
        return st, True

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += struct.pack("!BqBB", self.webrtc_flagged, -1 if self.flagged_at is None else self.flagged_at,
                           len(self.ssrc_slots), len(self.evicted_ssrcs))
        for ssrc, st in self.ssrc_slots.items():
            flags = st.saw_marker_last | (st.drop_current_frame << 1) | (st.fail_open << 2)
            out += _SLOT.pack(ssrc, st.last_timestamp, flags, st.frames_started & 0xFFFFFFFF)
        for ssrc in self.evicted_ssrcs:
            out += struct.pack("!I", ssrc)
        for key in sorted(self.policy_state):
            out += self.policy_state[key].to_bytes()
        return bytes(out)

    def serialized_size(self) -> int:
        return len(self.to_bytes())


class FlowTable:
    """FlowKey -> FlowState with least-recently-active eviction."""

    def __init__(self, capacity: int = 65536, ssrc_slots: int = DEFAULT_SSRC_SLOTS,
                 state_bound: int = DEFAULT_STATE_BOUND):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.ssrc_slots = ssrc_slots
        self.state_bound = state_bound
        self._flows: "OrderedDict[FlowKey, FlowState]" = OrderedDict()
        self.evictions = 0
        self.max_state_bytes = 0

    def __len__(self) -> int:
        return len(self._flows)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._flows

    def lookup(self, key: FlowKey) -> Optional[FlowState]:
        return self._flows.get(key)

    def get_or_create(self, key: FlowKey) -> FlowState:
        st = self._flows.get(key)
        if st is not None:
            self._flows.move_to_end(key)
            return st
        if len(self._flows) >= self.capacity:
            self._flows.popitem(last=False)
            self.evictions += 1
        st = FlowState(slot_capacity=self.ssrc_slots)
        self._flows[key] = st
        return st

    def account(self, state: FlowState) -> int:
        """State-size accounting hook; records the running maximum."""
        size = state.serialized_size()
        if size > self.max_state_bytes:
            self.max_state_bytes = size
        return size

    def items(self):
        return self._flows.items()

    def observe_dtls(self, flow: FlowKey, issuer: CertificateInfo, timestamp_us: int,
                     match: str = "WebRTC", mode: str = "exact") -> bool:
        """Flag ``flow`` and its reverse when the issuer matches. Returns the match result."""
        name = issuer.issuer_common_name
        hit = name == match if mode == "exact" else match in name
        if not hit:
            return False
        for key in (flow, flow.reverse()):
            st = self.get_or_create(key)
            if not st.webrtc_flagged:
                st.webrtc_flagged = True
                st.flagged_at = timestamp_us
        return True

    def dump(self) -> list[dict]:
        return [
            {"flow": str(k), "flagged_at_us": st.flagged_at}
            for k, st in sorted(self._flows.items(), key=lambda kv: kv[0].to_bytes())
            if st.webrtc_flagged
        ]

    def dump_json(self) -> str:
        return json.dumps({"flagged_flows": self.dump()}, indent=2)


def observe_dtls(flow: FlowKey, issuer: CertificateInfo, table: FlowTable, timestamp_us: int = 0,
                 match: str = "WebRTC", mode: str = "exact") -> FlowTable:
    table.observe_dtls(flow, issuer, timestamp_us, match, mode)
    return table


def lookup(flow: FlowKey, table: FlowTable) -> Optional[FlowState]:
    return table.lookup(flow)
