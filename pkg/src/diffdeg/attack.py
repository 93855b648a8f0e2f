"""Verdict policies: data-channel blocking, frame dropping, uniform loss, fixed delay."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Sequence, Union

from .core import DROP, PASS, DemuxClass, Packet, Verdict, VerdictKind
from .dtls import (APPLICATION_DATA, HT_CERTIFICATE, DtlsError, HandshakeReassembler,
                   extract_issuer, parse_records_lenient)
from .flowtable import FlowRng, FlowState, FlowTable, PeriodicCounter
from .rtp import DEFAULT_VIDEO_PTS, FrameEvent, RtpError, RtpHeader, SsrcState, frame_event, parse_rtp


# --- configuration --------------------------------------------------------


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be within [0, 1], got {rate}")


@dataclass(frozen=True)
class DataChannelBlock:
    issuer_match: str = "WebRTC"
    match_mode: str = "exact"  # or "substring"

    def __post_init__(self):
        if self.match_mode not in ("exact", "substring"):
            raise ValueError(f"unknown match_mode {self.match_mode!r}")


@dataclass(frozen=True)
class FrameDrop:
    rate: float
    seed: int = 0
    pt_set: FrozenSet[int] = DEFAULT_VIDEO_PTS
    mode: str = "bernoulli"  # or "periodic"
    marker_only: bool = False
    require_flag: bool = False

    def __post_init__(self):
        _check_rate(self.rate)
        object.__setattr__(self, "pt_set", frozenset(self.pt_set))
        if not self.pt_set:
            raise ValueError("pt_set must not be empty")
        if self.mode not in ("bernoulli", "periodic"):
            raise ValueError(f"unknown frame-drop mode {self.mode!r}")


@dataclass(frozen=True)
class UniformPacketLoss:
    rate: float
    seed: int = 0

    def __post_init__(self):
        _check_rate(self.rate)


@dataclass(frozen=True)
class FixedDelay:
    delay_ms: int
    # Only packets sent from these addresses are delayed; None delays all.
    from_addrs: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if int(self.delay_ms) != self.delay_ms or self.delay_ms <= 0:
            raise ValueError(f"delay_ms must be a positive integer, got {self.delay_ms}")
        if self.from_addrs is not None:
            object.__setattr__(self, "from_addrs",
                               frozenset(str(ipaddress.ip_address(a)) for a in self.from_addrs))


Policy = Union[DataChannelBlock, FrameDrop, UniformPacketLoss, FixedDelay]


@dataclass(frozen=True)
class Chain:
    policies: tuple

    def __post_init__(self):
        object.__setattr__(self, "policies", tuple(self.policies))
        if not self.policies:
            raise ValueError("Chain must not be empty")
        if any(isinstance(p, Chain) for p in self.policies):
            raise ValueError("Chains do not nest")
        if sum(isinstance(p, FrameDrop) for p in self.policies) > 1:
            raise ValueError("at most one FrameDrop per chain (frame state is shared per SSRC)")


def as_policies(chain: Union[Chain, Policy, Sequence[Policy], None]) -> tuple:
    if chain is None:
        return ()
    if isinstance(chain, Chain):
        return chain.policies
    if isinstance(chain, (DataChannelBlock, FrameDrop, UniformPacketLoss, FixedDelay)):
        return (chain,)
    return Chain(tuple(chain)).policies if chain else ()


def policy_name(policy: Policy) -> str:
    return {
        DataChannelBlock: "data_channel_block",
        FrameDrop: "frame_drop",
        UniformPacketLoss: "uniform_packet_loss",
        FixedDelay: "fixed_delay",
    }[type(policy)]


# --- per-packet view ------------------------------------------------------


@dataclass
class PacketView:
    packet: Packet
    demux: DemuxClass
    records: Optional[list] = None
    rtp: Optional[RtpHeader] = None
    parse_error: Optional[str] = None
    event: Optional[FrameEvent] = None
    slot: Optional[SsrcState] = None

    @property
    def has_application_data(self) -> bool:
        return bool(self.records) and any(r.content_type == APPLICATION_DATA for r in self.records)


def classify(packet: Packet) -> PacketView:
    cls = packet.demux_class
    view = PacketView(packet, cls, parse_error=packet.parse_error)
    if cls is DemuxClass.DTLS:
        records, err = parse_records_lenient(packet.payload)
        view.records = records
        if err is not None:
            view.parse_error = str(err)
    elif cls is DemuxClass.RTP:
        try:
            view.rtp = parse_rtp(packet.payload)
        except RtpError as exc:
            view.parse_error = str(exc)
            view.demux = DemuxClass.UNKNOWN
    return view


# --- decisions ------------------------------------------------------------


def decide_data_channel_block(view: PacketView, flow_state: Optional[FlowState]) -> Verdict:
    if flow_state is None or not flow_state.webrtc_flagged:
        return PASS
    if view.demux is DemuxClass.DTLS and view.has_application_data:
        return DROP
    return PASS


def decide_frame_drop(view: PacketView, flow_state: Optional[FlowState], config: FrameDrop,
                      chooser) -> Verdict:
    """``chooser()`` returns True when a newly started frame should be dropped."""
    if view.rtp is None or view.event is None or view.slot is None:
        return PASS
    if config.require_flag and (flow_state is None or not flow_state.webrtc_flagged):
        return PASS
    slot = view.slot
    if view.event.new_frame:
        if slot.fail_open:
            slot.fail_open = False
            slot.drop_current_frame = False
        else:
            slot.drop_current_frame = chooser()
    return DROP if slot.drop_current_frame else PASS


def decide_uniform_loss(view: PacketView, config: UniformPacketLoss, rng: FlowRng) -> Verdict:
    return DROP if rng.random() < config.rate else PASS


def decide_fixed_delay(view: PacketView, config: FixedDelay) -> Verdict:
    if config.from_addrs is not None:
        flow = view.packet.flow
        if flow is None or str(flow.src_addr) not in config.from_addrs:
            return PASS
    return Verdict.delay(config.delay_ms)


def combine(verdicts: Iterable[Verdict]) -> Verdict:
    total = 0
    for v in verdicts:
        if v.kind is VerdictKind.DROP:
            return DROP
        total += v.delay_ms
    return Verdict.delay(total) if total else PASS


# --- statistics -----------------------------------------------------------


@dataclass
class PolicyStats:
    policy: str
    packets_seen: int = 0
    packets_dropped: int = 0
    packets_delayed: int = 0
    frames_seen: int = 0
    frames_dropped: int = 0
    frames_failed_open: int = 0
    per_flow: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "packets_seen": self.packets_seen,
            "packets_dropped": self.packets_dropped,
            "packets_delayed": self.packets_delayed,
            "frames_seen": self.frames_seen,
            "frames_dropped": self.frames_dropped,
            "frames_failed_open": self.frames_failed_open,
            "per_flow": {k: dict(v) for k, v in sorted(self.per_flow.items())},
        }

    def merge(self, other: "PolicyStats") -> None:
        for name in ("packets_seen", "packets_dropped", "packets_delayed", "frames_seen",
                     "frames_dropped", "frames_failed_open"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        _merge_counts(self.per_flow, other.per_flow)


@dataclass
class AttackStats:
    policies: list = field(default_factory=list)
    packets_seen: int = 0
    packets_dropped: int = 0
    packets_delayed: int = 0
    parse_errors: int = 0
    flows_flagged: int = 0
    unparseable_handshakes: int = 0
    state_max_bytes: int = 0
    flow_evictions: int = 0
    ssrc_evictions: int = 0
    by_class: dict = field(default_factory=dict)
    per_flow: dict = field(default_factory=dict)

    @property
    def frames_seen(self) -> int:
        return sum(p.frames_seen for p in self.policies)

    @property
    def frames_dropped(self) -> int:
        return sum(p.frames_dropped for p in self.policies)

    def to_dict(self) -> dict:
        return {
            "packets_seen": self.packets_seen,
            "packets_dropped": self.packets_dropped,
            "packets_delayed": self.packets_delayed,
            "frames_seen": self.frames_seen,
            "frames_dropped": self.frames_dropped,
            "parse_errors": self.parse_errors,
            "flows_flagged": self.flows_flagged,
            "unparseable_handshakes": self.unparseable_handshakes,
            "state_max_bytes": self.state_max_bytes,
            "flow_evictions": self.flow_evictions,
            "ssrc_evictions": self.ssrc_evictions,
            "by_class": {k: dict(v) for k, v in sorted(self.by_class.items())},
            "policies": [p.to_dict() for p in self.policies],
            "per_flow": {k: dict(v) for k, v in sorted(self.per_flow.items())},
        }

    def merge(self, other: "AttackStats") -> None:
        for name in ("packets_seen", "packets_dropped", "packets_delayed", "parse_errors", "flows_flagged",
                     "unparseable_handshakes", "flow_evictions", "ssrc_evictions"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.state_max_bytes = max(self.state_max_bytes, other.state_max_bytes)
        _merge_counts(self.by_class, other.by_class)
        _merge_counts(self.per_flow, other.per_flow)
        if not self.policies:
            self.policies = [PolicyStats(p.policy) for p in other.policies]
        for mine, theirs in zip(self.policies, other.policies):
            mine.merge(theirs)


def _merge_counts(dst: dict, src: dict) -> None:
    for key, counts in src.items():
        slot = dst.setdefault(key, {})
        for name, value in counts.items():
            slot[name] = slot.get(name, 0) + value


def _bump(table: dict, key: str, name: str, n: int = 1) -> None:
    slot = table.setdefault(key, {})
    slot[name] = slot.get(name, 0) + n


# --- the censor -----------------------------------------------------------


class Censor:
    """Applies a policy chain packet by packet over a bounded flow table.

    Every policy is evaluated (so per-flow state and RNG streams advance
    identically regardless of what earlier policies decided); the first Drop
    is the one credited in the statistics.
    """

    def __init__(self, chain=None, table: Optional[FlowTable] = None, instrument: bool = True,
                 handshake_buffer: int = 16 * 1024, scan_all_certificates: bool = False):
        self.policies = as_policies(chain)
        self.table = table if table is not None else FlowTable()
        self.instrument = instrument
        self.handshake_buffer = handshake_buffer
        self.scan_all_certificates = scan_all_certificates
        self.stats = AttackStats(policies=[PolicyStats(policy_name(p)) for p in self.policies])
        self._frame_drop = next((p for p in self.policies if isinstance(p, FrameDrop)), None)
        dcb = next((p for p in self.policies if isinstance(p, DataChannelBlock)), None)
        self.issuer_match = dcb.issuer_match if dcb else "WebRTC"
        self.match_mode = dcb.match_mode if dcb else "exact"
        self.inspect_handshakes = dcb is not None or (self._frame_drop is not None and self._frame_drop.require_flag)
        # Transient reassembly buffers; released once a flow's certificate is judged.
        self._handshakes: dict = {}
        self._judged: set = set()
        self._flowless_rngs: dict = {}

    # state helpers

    def _rng(self, idx: int, state: Optional[FlowState], packet: Packet, seed: int) -> FlowRng:
        if state is None:
            rng = self._flowless_rngs.get(idx)
            if rng is None:
                rng = self._flowless_rngs[idx] = FlowRng(seed)
            return rng
        rng = state.policy_state.get(idx)
        if rng is None:
            rng = state.policy_state[idx] = FlowRng(seed ^ packet.flow.stable_hash())
        return rng

    def _chooser(self, idx: int, state: FlowState, packet: Packet, config: FrameDrop):
        if config.mode == "periodic":
            def choose():
                counter = state.policy_state.get(idx)
                if counter is None:
                    counter = state.policy_state[idx] = PeriodicCounter()
                return counter.step(config.rate)
        else:
            def choose():
                return self._rng(idx, state, packet, config.seed).random() < config.rate
        return choose

    def _observe_handshake(self, view: PacketView) -> None:
        flow = view.packet.flow
        canon = flow.canonical()
        if canon in self._judged or not view.records:
            return
        hs = [r for r in view.records if r.content_type == 22 and r.epoch == 0]
        if not hs:
            return
        reasm = self._handshakes.get(flow)
        if reasm is None:
            reasm = self._handshakes[flow] = HandshakeReassembler(self.handshake_buffer)
        try:
            messages = reasm.feed_all(hs)
        except DtlsError:
            reasm.unparseable = True
            messages = []
        for msg in messages:
            if msg.msg_type != HT_CERTIFICATE:
                continue
            try:
                info = extract_issuer(msg, all_certificates=self.scan_all_certificates)
            except DtlsError:
                continue
            if self.table.observe_dtls(flow, info, view.packet.timestamp_us, self.issuer_match, self.match_mode):
                self.stats.flows_flagged += 2
                self._judged.add(canon)
                self._handshakes.pop(flow, None)
                self._handshakes.pop(flow.reverse(), None)
                return
        if reasm.unparseable:
            self.stats.unparseable_handshakes += 1
            self._handshakes.pop(flow, None)

    # main entry

    def process(self, packet: Packet) -> Verdict:
        view = classify(packet)
        stats = self.stats
        if view.parse_error:
            stats.parse_errors += 1
        state = None
        if packet.flow is not None:
            state = self.table.get_or_create(packet.flow)
        if state is not None and view.demux is DemuxClass.DTLS and self.inspect_handshakes:
            self._observe_handshake(view)
        fd = self._frame_drop
        if fd is not None and state is not None and view.rtp is not None and view.rtp.payload_type in fd.pt_set:
            evictions = state.slot_evictions
            slot, _ = state.slot(view.rtp.ssrc)
            stats.ssrc_evictions += state.slot_evictions - evictions
            view.slot = slot
            view.event = frame_event(view.rtp, slot, fd.marker_only)

        verdicts = []
        for idx, policy in enumerate(self.policies):
            if isinstance(policy, DataChannelBlock):
                v = decide_data_channel_block(view, state)
            elif isinstance(policy, FrameDrop):
                if state is None:
                    v = PASS
                else:
                    was_open = view.slot.fail_open if view.slot is not None else False
                    v = decide_frame_drop(view, state, policy, self._chooser(idx, state, packet, policy))
                    if view.event is not None and view.event.new_frame:
                        pst = stats.policies[idx]
                        pst.frames_seen += 1
                        if was_open:
                            pst.frames_failed_open += 1
                        if view.slot.drop_current_frame:
                            pst.frames_dropped += 1
            elif isinstance(policy, UniformPacketLoss):
                v = decide_uniform_loss(view, policy, self._rng(idx, state, packet, policy.seed))
            else:
                v = decide_fixed_delay(view, policy)
            verdicts.append(v)

        final = combine(verdicts)
        self._account(view, state, verdicts, final)
        return final

    def _account(self, view: PacketView, state: Optional[FlowState], verdicts: list, final: Verdict) -> None:
        stats = self.stats
        flow_key = str(view.packet.flow) if view.packet.flow is not None else "non-ip"
        dropped = final.is_drop
        stats.packets_seen += 1
        _bump(stats.per_flow, flow_key, "packets_seen")
        _bump(stats.by_class, view.demux.value, "seen")
        if dropped:
            stats.packets_dropped += 1
            _bump(stats.per_flow, flow_key, "packets_dropped")
            _bump(stats.by_class, view.demux.value, "dropped")
        elif final.kind is VerdictKind.DELAY:
            stats.packets_delayed += 1
        if view.has_application_data:
            _bump(stats.per_flow, flow_key, "dtls_app_data_seen")
            if dropped:
                _bump(stats.per_flow, flow_key, "dtls_app_data_dropped")
        if view.rtp is not None:
            _bump(stats.per_flow, flow_key, "rtp_seen")
            if dropped:
                _bump(stats.per_flow, flow_key, "rtp_dropped")
        credited = False
        for pst, v in zip(stats.policies, verdicts):
            pst.packets_seen += 1
            if v.is_drop and not credited:
                credited = True
                pst.packets_dropped += 1
                _bump(pst.per_flow, flow_key, "packets_dropped")
            elif v.kind is VerdictKind.DELAY and not dropped:
                pst.packets_delayed += 1
        if state is not None and self.instrument:
            stats.state_max_bytes = max(stats.state_max_bytes, self.table.account(state))
        stats.flow_evictions = self.table.evictions


def compose(chain, packets: Iterable[Packet], censor: Optional[Censor] = None) -> list[Verdict]:
    """Verdicts for ``packets`` under ``chain`` (a fresh censor unless one is given)."""
    censor = censor if censor is not None else Censor(chain)
    return [censor.process(p) for p in packets]
