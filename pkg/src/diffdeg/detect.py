"""Frame-size statistics and the adapts-under-attack distinguisher."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from typing import FrozenSet, Iterable, Optional

from .attack import Censor
from .core import DemuxClass, Packet, VerdictKind
from .rtp import DEFAULT_VIDEO_PTS, FrameAssembler, RtpError, parse_rtp
from .synth import SourceModel, StreamSpec, gen_video_stream


@dataclass
class FrameSizeStats:
    ssrc: int
    frame_count: int
    mean_frame_bytes: float
    stdev_frame_bytes: float
    histogram: list
    bin_width: int = 500
    hist_max: int = 50000
    # Frames at or beyond hist_max.
    overflow: int = 0
    sizes: list = field(default_factory=list, repr=False)

    def scaled(self, c: float) -> "FrameSizeStats":
        return stats_from_sizes(self.ssrc, [s * c for s in self.sizes], self.bin_width, self.hist_max)

    def to_dict(self) -> dict:
        return {
            "ssrc": self.ssrc,
            "frame_count": self.frame_count,
            "mean_frame_bytes": self.mean_frame_bytes,
            "stdev_frame_bytes": self.stdev_frame_bytes,
            "histogram_bin_bytes": self.bin_width,
            "histogram_max_bytes": self.hist_max,
            "histogram": list(self.histogram),
            "overflow": self.overflow,
        }


def stats_from_sizes(ssrc: int, sizes: list, bin_width: int = 500, hist_max: int = 50000) -> FrameSizeStats:
    n = len(sizes)
    mean = sum(sizes) / n if n else 0.0
    stdev = math.sqrt(sum((s - mean) ** 2 for s in sizes) / n) if n else 0.0
    bins = [0] * math.ceil(hist_max / bin_width)
    overflow = 0
    for s in sizes:
        if s >= hist_max:
            overflow += 1
        else:
            bins[int(s // bin_width)] += 1
    return FrameSizeStats(ssrc, n, mean, stdev, bins, bin_width, hist_max, overflow, list(sizes))


def frame_sizes(packets: Iterable[Packet], pt_set: FrozenSet[int] = DEFAULT_VIDEO_PTS, *,
                bin_width: int = 500, hist_max: int = 50000, marker_only: bool = False,
                counters: Optional[dict] = None) -> list:
    """Per-SSRC frame-size statistics over the packets actually observed.

    A frame's size is the sum of its packets' RTP payload lengths; frames
    without an observed marker packet are left out.
    """
    asm = FrameAssembler(marker_only)
    open_size: dict = {}
    sizes: dict = {}
    skipped = 0
    for pkt in packets:
        if pkt.demux_class is not DemuxClass.RTP:
            continue
        try:
            hdr = parse_rtp(pkt.payload)
        except RtpError:
            skipped += 1
            continue
        if hdr.payload_type not in pt_set:
            continue
        ev = asm.push(hdr)
        if ev.new_frame:
            open_size[hdr.ssrc] = 0  # any unfinished frame is discarded
        if hdr.ssrc not in open_size:
            continue
        open_size[hdr.ssrc] += hdr.payload_length
        if hdr.marker:
            sizes.setdefault(hdr.ssrc, []).append(open_size.pop(hdr.ssrc))
    if counters is not None:
        counters["skipped"] = counters.get("skipped", 0) + skipped
    return [stats_from_sizes(ssrc, sizes[ssrc], bin_width, hist_max) for ssrc in sorted(sizes)]


class Label(enum.Enum):
    ADAPTIVE = "Adaptive"
    NON_ADAPTIVE = "NonAdaptive"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class DistinguisherVerdict:
    label: Label
    reduction_fraction: float
    frames_observed: tuple

    def to_dict(self) -> dict:
        return {"label": self.label.value, "reduction_fraction": self.reduction_fraction,
                "frames_observed": list(self.frames_observed)}


def distinguish(baseline: FrameSizeStats, under_attack: FrameSizeStats, threshold: float = 0.20,
                min_frames: int = 50) -> DistinguisherVerdict:
    """Genuine adaptive video shrinks its frames under frame loss; a source
    that does not is labelled NonAdaptive."""
    if baseline.mean_frame_bytes <= 0:
        raise ValueError("baseline mean frame size is zero")
    reduction = 1.0 - under_attack.mean_frame_bytes / baseline.mean_frame_bytes
    observed = (baseline.frame_count, under_attack.frame_count)
    if min(observed) < min_frames:
        label = Label.INCONCLUSIVE
    elif reduction >= threshold:
        label = Label.ADAPTIVE
    else:
        label = Label.NON_ADAPTIVE
    return DistinguisherVerdict(label, reduction, observed)


@dataclass
class TwoPhase:
    baseline: list
    under_attack: list
    profiles: list


def two_phase_stream(model: SourceModel, spec: StreamSpec, policy, baseline_s: float, attack_s: float) -> TwoPhase:
    """One stream: clean for ``baseline_s``, then through ``policy`` for
    ``attack_s`` with the source fed the frame loss it suffers. Returns the
    packets a censor downstream of the attack would observe in each phase."""
    censor = Censor(policy, instrument=False)
    boundary_us = spec.start_us + round(baseline_s * 1e6)
    baseline: list = []
    attacked: list = []
    seen = [0]

    def feedback(window: int, packets: list) -> float:
        seen[0] += len(packets)
        frames = lost = 0
        frame_dropped = False
        for p in packets:
            if p.timestamp_us < boundary_us:
                baseline.append(p)
                continue
            v = censor.process(p)
            hdr = parse_rtp(p.payload)
            if v.kind is VerdictKind.DROP:
                frame_dropped = True
            else:
                attacked.append(p)
            if hdr.marker:
                frames += 1
                lost += frame_dropped
                frame_dropped = False
        return lost / frames if frames else 0.0

    stream = gen_video_stream(model, replace(spec, duration_s=baseline_s + attack_s), feedback)
    if seen[0] < len(stream.packets):
        feedback(-1, stream.packets[seen[0]:])
    return TwoPhase(baseline, attacked, stream.profiles)


def write_frame_sizes_csv(stats: Iterable[FrameSizeStats], path, phase: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "ssrc", "frame", "size_bytes"])
        for st in stats:
            for i, size in enumerate(st.sizes):
                writer.writerow([phase, st.ssrc, i, size])


def pair_fixture(seed: int = 0, rate: float = 0.25, baseline_s: float = 10.0, attack_s: float = 15.0):
    """A capture holding one adaptive and one non-adaptive stream, each clean
    for ``baseline_s`` then under FrameDrop(rate), as seen past the censor."""
    from .attack import FrameDrop
    from .core import FlowKey
    from .synth import default_adaptive, default_non_adaptive, merge

    streams = []
    for i, model in enumerate((default_adaptive(), default_non_adaptive())):
        spec = StreamSpec(flow=FlowKey.of(f"10.9.0.{i + 1}", 40000 + i, "10.9.1.1", 50000), ssrc=0xADA0 + i,
                          seed=seed * 2 + i, start_us=i * 10)
        tp = two_phase_stream(model, spec, FrameDrop(rate, seed=seed + i), baseline_s, attack_s)
        streams.append(tp.baseline + tp.under_attack)
    return merge(*streams)
