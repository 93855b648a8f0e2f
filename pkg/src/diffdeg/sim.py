"""Desk-scale differential degradation: a reliable covert channel tunneled in
video frames versus an adaptive video source, both crossing the same censor."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .attack import Censor, Chain, FrameDrop, UniformPacketLoss, as_policies
from .core import FlowKey, Packet, VerdictKind
from .rtp import parse_rtp
from .synth import (GeneratedStream, NonAdaptive, SourceModel, StreamSpec, default_adaptive,
                    default_non_adaptive, gen_video_stream)

FORWARD_FLOW = FlowKey.of("10.1.0.1", 41000, "10.2.0.1", 51000)
VIDEO_FLOW = FlowKey.of("10.1.0.2", 42000, "10.2.0.2", 52000)


# --- closed-form oracle ----------------------------------------------------


def analytic_frame_loss(q: float, n: int) -> float:
    """Probability that a frame of ``n`` packets loses at least one packet
    under independent per-packet loss ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"packet loss rate must be within [0, 1], got {q}")
    if int(n) != n or n < 1:
        raise ValueError(f"packets per frame must be a positive integer, got {n}")
    return 1.0 - (1.0 - q) ** int(n)


def monte_carlo_frame_loss(q: float, n: int, frames: int = 1_000_000, seed: int = 0,
                           chunk: int = 100_000) -> float:
    """Sampling estimate of the same quantity; kept independent of the formula."""
    rng = np.random.default_rng(seed)
    lost = 0
    done = 0
    while done < frames:
        m = min(chunk, frames - done)
        lost += int(np.any(rng.random((m, n)) < q, axis=1).sum())
        done += m
    return lost / frames


# --- models and report -----------------------------------------------------


@dataclass(frozen=True)
class CovertChannelModel:
    message_bytes: int = 1500
    retransmit_timeout_ms: float = 1000.0
    rto_backoff: float = 2.0
    rto_cap_ms: float = 60_000.0
    window_messages: int = 4
    carrier: NonAdaptive = field(default_factory=default_non_adaptive)

    def __post_init__(self):
        if self.message_bytes <= 0 or self.retransmit_timeout_ms <= 0 or self.rto_cap_ms <= 0:
            raise ValueError("covert channel parameters must be positive")
        if self.rto_backoff < 1.0:
            raise ValueError("rto_backoff must be >= 1")
        if self.window_messages < 1:
            raise ValueError("window_messages must be >= 1")

    def rto_ms(self, retries: int) -> float:
        return min(self.retransmit_timeout_ms * self.rto_backoff ** retries, self.rto_cap_ms)


@dataclass
class DegradationReport:
    covert_goodput_bytes_per_s: float
    covert_offered_load_bytes_per_s: float
    covert_message_loss_before_recovery: float
    covert_latency_ms: float
    covert_ack_latency_ms: float
    covert_messages_delivered: int
    covert_retransmissions: int
    video_delivered_fps: float
    video_source_fps: float
    video_final_profile: str
    frame_loss_achieved: float
    carrier_frame_loss: float
    duration_s: float
    seed: int
    policy: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _policy_echo(policies) -> list:
    from .config import policy_to_dict
    return [policy_to_dict(p) for p in policies]


def differential_ratio(report: DegradationReport, baseline: DegradationReport) -> float:
    """Relative covert degradation over relative video degradation.

    Both zero gives 1.0 (see ``degradation_label``); video zero with covert
    positive gives +inf.
    """
    if baseline.covert_goodput_bytes_per_s <= 0:
        raise ValueError("baseline covert goodput is zero")
    if baseline.video_delivered_fps <= 0:
        raise ValueError("baseline video fps is zero")
    d_covert = 1.0 - report.covert_goodput_bytes_per_s / baseline.covert_goodput_bytes_per_s
    d_video = 1.0 - report.video_delivered_fps / baseline.video_delivered_fps
    return ratio_of(d_covert, d_video)


def ratio_of(d_covert: float, d_video: float, eps: float = 1e-12) -> float:
    if abs(d_video) <= eps:
        if abs(d_covert) <= eps:
            return 1.0
        return math.inf if d_covert > 0 else -math.inf
    return d_covert / d_video


def degradation_label(report: DegradationReport, baseline: DegradationReport) -> str:
    d_covert = 1.0 - report.covert_goodput_bytes_per_s / baseline.covert_goodput_bytes_per_s
    d_video = 1.0 - report.video_delivered_fps / baseline.video_delivered_fps
    if abs(d_covert) <= 1e-12 and abs(d_video) <= 1e-12:
        return "no degradation"
    if d_video <= 1e-12:
        return "covert only"
    return "differential" if d_covert > d_video else "non-differential"


# --- frame delivery through the censor -------------------------------------


@dataclass
class FrameOutcome:
    time_us: int
    delivered: bool
    # Per packet: arrival time at the receiver, or None when dropped.
    arrivals: list
    recovered: bool = False


def _pass_frame(censor: Censor, packets: Sequence[Packet]) -> list:
    arrivals = []
    for pkt in packets:
        v = censor.process(pkt)
        if v.kind is VerdictKind.DROP:
            arrivals.append(None)
        else:
            arrivals.append(pkt.timestamp_us + v.delay_ms * 1000)
    return arrivals


def _retransmission(packets: Sequence[Packet], offset_us: int, seq_shift: int) -> list:
    out = []
    for p in packets:
        payload = bytearray(p.payload)
        seq = (int.from_bytes(payload[2:4], "big") + seq_shift) & 0xFFFF
        payload[2:4] = seq.to_bytes(2, "big")
        out.append(replace(p, timestamp_us=p.timestamp_us + offset_us, payload=bytes(payload)))
    return out


class FrameChannel:
    """Pushes whole frames through a censor, with optional single NACK-style
    retransmission of a damaged frame (probability ``recovery``)."""

    def __init__(self, censor: Censor, recovery: float, rng: np.random.Generator, nack_delay_us: int):
        self.censor = censor
        self.recovery = recovery
        self.rng = rng
        self.nack_delay_us = nack_delay_us

    def send(self, packets: Sequence[Packet]) -> FrameOutcome:
        arrivals = _pass_frame(self.censor, packets)
        ok = all(a is not None for a in arrivals)
        if ok or self.recovery <= 0 or self.rng.random() >= self.recovery:
            return FrameOutcome(packets[0].timestamp_us, ok, arrivals)
        again = _pass_frame(self.censor, _retransmission(packets, self.nack_delay_us, 0x4000))
        merged = [a if a is not None else b for a, b in zip(arrivals, again)]
        ok = all(a is not None for a in merged)
        return FrameOutcome(packets[0].timestamp_us, ok, merged, recovered=ok)


def _split_frames(packets: Sequence[Packet]) -> list:
    frames, cur = [], []
    for p in packets:
        cur.append(p)
        if parse_rtp(p.payload).marker:
            frames.append(cur)
            cur = []
    if cur:
        frames.append(cur)
    return frames


# --- ARQ over carrier frames -----------------------------------------------


def _message_arrivals(frame_bytes: int, capacity: int, mb: int, mtu: int, outcome: FrameOutcome) -> list:
    """Arrival time (or None) for each message slot packed into one frame."""
    out = []
    for j in range(capacity):
        first_pkt = (j * mb) // mtu
        last_pkt = ((j + 1) * mb - 1) // mtu
        times = outcome.arrivals[first_pkt : last_pkt + 1]
        out.append(None if any(t is None for t in times) else max(times))
    return out


@dataclass
class _ArqResult:
    delivered: int
    offered: int
    first_loss: float
    latency_ms: float
    ack_latency_ms: float
    retransmissions: int
    per_window_bytes: dict


def _run_arq(model: CovertChannelModel, fwd: GeneratedStream, fwd_out: list, rev_out: list,
             mtu: int, end_us: int, window_us: int) -> _ArqResult:
    mb = model.message_bytes
    W = model.window_messages
    events: list = []
    counter = 0

    def push(t, kind, data):
        nonlocal counter
        heapq.heappush(events, (t, 0 if kind in ("arrive", "ack") else 1, counter, kind, data))
        counter += 1

    for k, outcome in enumerate(fwd_out):
        push(outcome.time_us, "fwd", k)
    for k, outcome in enumerate(rev_out):
        push(outcome.time_us, "rev", k)

    next_id = 0
    outstanding: dict = {}  # id -> [first_send_us, retries, deadline_us]
    first_send: dict = {}
    first_lost: dict = {}
    delivered_at: dict = {}
    acked_at: dict = {}
    pending_acks: set = set()
    retransmissions = 0
    offered = 0
    per_window: dict = {}

    while events:
        t, _, _, kind, data = heapq.heappop(events)
        if kind == "fwd":
            frame = fwd.frames[data]
            outcome = fwd_out[data]
            cap = frame.size // mb
            offered += min(cap, W)
            if cap == 0:
                continue
            due = sorted(mid for mid, st in outstanding.items() if st[2] <= t)
            sending = due[:cap]
            room = cap - len(sending)
            while room > 0 and len(outstanding) < W:
                outstanding[next_id] = [t, -1, 0]
                first_send[next_id] = t
                sending.append(next_id)
                next_id += 1
                room -= 1
            arrivals = _message_arrivals(frame.size, len(sending), mb, mtu, outcome)
            for mid, arr in zip(sending, arrivals):
                st = outstanding[mid]
                st[1] += 1
                if st[1] > 0:
                    retransmissions += 1
                st[2] = t + round(model.rto_ms(st[1]) * 1000)
                if st[1] == 0:
                    first_lost[mid] = arr is None
                if arr is not None:
                    push(arr, "arrive", mid)
        elif kind == "arrive":
            if data not in delivered_at:
                delivered_at[data] = t
                if t < end_us:
                    w = (t // window_us) if window_us else 0
                    per_window[w] = per_window.get(w, 0) + mb
            pending_acks.add(data)
        elif kind == "rev":
            if not pending_acks:
                continue
            outcome = rev_out[data]
            arr = outcome.arrivals[0]  # cumulative ack rides the frame's first packet
            if arr is not None:
                push(arr, "ack", tuple(sorted(pending_acks)))
                pending_acks.clear()
        elif kind == "ack":
            for mid in data:
                if mid in outstanding:
                    del outstanding[mid]
                    acked_at[mid] = t

    delivered = [m for m, ta in delivered_at.items() if ta < end_us]
    latencies = [delivered_at[m] - first_send[m] for m in delivered]
    acks = [acked_at[m] - first_send[m] for m in acked_at if acked_at[m] < end_us]
    return _ArqResult(
        delivered=len(delivered),
        offered=offered,
        first_loss=(sum(first_lost.values()) / len(first_lost)) if first_lost else 0.0,
        latency_ms=(float(np.mean(latencies)) / 1000.0) if latencies else 0.0,
        ack_latency_ms=(float(np.mean(acks)) / 1000.0) if acks else 0.0,
        retransmissions=retransmissions,
        per_window_bytes=per_window,
    )


# --- the simulation ---------------------------------------------------------


def _derive(seed: int, *salt: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *salt]).generate_state(1, np.uint64)[0])


def _seeded_chain(policies, seed: int) -> tuple:
    out = []
    for i, p in enumerate(policies):
        if isinstance(p, (FrameDrop, UniformPacketLoss)):
            p = replace(p, seed=_derive(seed, 7, i, p.seed & 0xFFFFFFFF))
        out.append(p)
    return tuple(out)


def simulate(covert: CovertChannelModel = CovertChannelModel(), video: SourceModel = None, policy=None,
             duration_s: float = 300.0, seed: int = 0, *, qos_recovery: float = 0.0,
             settle_windows: int = 1, video_payload_type: int = 102) -> DegradationReport:
    """Run the covert channel and the video source through one censor.

    ``policy`` is any policy or Chain; FrameDrop/UniformPacketLoss seeds are
    mixed with ``seed`` so a seed sweep varies the attack's draws too.
    """
    video = video if video is not None else default_adaptive()
    if not 0.0 <= qos_recovery <= 1.0:
        raise ValueError("qos_recovery must be within [0, 1]")
    policies = _seeded_chain(as_policies(policy), seed)
    censor = Censor(policies, instrument=False)
    rng = np.random.default_rng(_derive(seed, 1))
    carrier = covert.carrier
    frame_us = round(1e6 / carrier.profile.fps)
    nack_us = frame_us // 4
    channel = FrameChannel(censor, qos_recovery, rng, nack_us)
    end_us = round(duration_s * 1e6)

    # Carrier in both directions; reverse frames are offset by half a frame.
    fwd_spec = StreamSpec(flow=FORWARD_FLOW, ssrc=0xC0FFEE01, payload_type=video_payload_type,
                          duration_s=duration_s, seed=_derive(seed, 2))
    rev_spec = replace(fwd_spec, flow=FORWARD_FLOW.reverse(), ssrc=0xC0FFEE02, seed=_derive(seed, 3),
                       start_us=frame_us // 2)
    fwd = gen_video_stream(carrier, fwd_spec)
    rev = gen_video_stream(carrier, replace(rev_spec, duration_s=max(0.0, duration_s - rev_spec.start_us / 1e6)))
    fwd_out = [channel.send(fwd.packets[f.first_packet : f.first_packet + f.packet_count]) for f in fwd.frames]
    rev_out = [channel.send(rev.packets[f.first_packet : f.first_packet + f.packet_count]) for f in rev.frames]

    # Video: adaptive feedback is the frame loss achieved in each window.
    video_outcomes: list = []
    processed = [0]

    def feedback(window: int, packets: list) -> float:
        frames = _split_frames(packets)
        outs = [channel.send(f) for f in frames]
        video_outcomes.extend(outs)
        processed[0] += len(packets)
        return (sum(not o.delivered for o in outs) / len(outs)) if outs else 0.0

    vspec = StreamSpec(flow=VIDEO_FLOW, ssrc=0x51DE0001, payload_type=video_payload_type, duration_s=duration_s,
                       seed=_derive(seed, 4))
    vstream = gen_video_stream(video, vspec, feedback)
    if processed[0] < len(vstream.packets):
        feedback(-1, vstream.packets[processed[0]:])

    window_s = video.window_s
    window_us = round(window_s * 1e6)
    arq = _run_arq(covert, fwd, fwd_out, rev_out, fwd_spec.mtu_payload_bytes, end_us, window_us)

    settle_us = min(settle_windows * window_us, end_us)
    span_s = (end_us - settle_us) / 1e6
    settled = [o for o in video_outcomes if o.time_us >= settle_us]
    delivered_fps = (sum(o.delivered for o in settled) / span_s) if span_s > 0 else 0.0
    source_fps = (len(settled) / span_s) if span_s > 0 else 0.0
    vloss = (sum(not o.delivered for o in video_outcomes) / len(video_outcomes)) if video_outcomes else 0.0
    closs = (sum(not o.delivered for o in fwd_out) / len(fwd_out)) if fwd_out else 0.0

    windows = []
    n_windows = math.ceil(end_us / window_us) if window_us else 0
    for w in range(n_windows):
        lo, hi = w * window_us, min((w + 1) * window_us, end_us)
        vo = [o for o in video_outcomes if lo <= o.time_us < hi]
        windows.append({
            "window": w,
            "start_s": lo / 1e6,
            "video_profile": vstream.profiles[w] if w < len(vstream.profiles) else vstream.profiles[-1],
            "video_frames": len(vo),
            "video_frames_delivered": sum(o.delivered for o in vo),
            "covert_bytes_delivered": arq.per_window_bytes.get(w, 0),
        })

    return DegradationReport(
        covert_goodput_bytes_per_s=arq.delivered * covert.message_bytes / duration_s if duration_s else 0.0,
        covert_offered_load_bytes_per_s=arq.offered * covert.message_bytes / duration_s if duration_s else 0.0,
        covert_message_loss_before_recovery=arq.first_loss,
        covert_latency_ms=arq.latency_ms,
        covert_ack_latency_ms=arq.ack_latency_ms,
        covert_messages_delivered=arq.delivered,
        covert_retransmissions=arq.retransmissions,
        video_delivered_fps=delivered_fps,
        video_source_fps=source_fps,
        video_final_profile=vstream.profiles[-1],
        frame_loss_achieved=vloss,
        carrier_frame_loss=closs,
        duration_s=duration_s,
        seed=seed,
        policy=_policy_echo(policies),
        windows=windows,
    )


def sweep(rates: Sequence[float], covert: CovertChannelModel = CovertChannelModel(), video: SourceModel = None,
          duration_s: float = 300.0, seed: int = 0, extra=(), **kwargs) -> list:
    """One report per frame-drop rate; ``extra`` policies (e.g. FixedDelay) are chained after FrameDrop."""
    return [simulate(covert, video, Chain((FrameDrop(rate),) + tuple(extra)), duration_s, seed, **kwargs)
            for rate in rates]


def write_windows_csv(report: DegradationReport, path) -> None:
    fields = ["window", "start_s", "video_profile", "video_frames", "video_frames_delivered",
              "covert_bytes_delivered"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(report.windows)
