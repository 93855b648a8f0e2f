"""Command-line entry point: inspect, attack, synth, sim, detect, report."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import config as cfgmod
from .attack import FixedDelay, FrameDrop, UniformPacketLoss
from .capture import CaptureError, Trace, read_capture, write_capture
from .config import ConfigError
from .core import DemuxClass, PROTO_UDP
from .dtls import HT_CERTIFICATE, DtlsError, HandshakeReassembler, extract_issuer, parse_records_lenient
from .flowtable import FlowTable
from .report import RunReport, read_report, write_report
from .rtp import FrameAssembler, RtpError, parse_rtp

log = logging.getLogger("diffdeg")


class CommandError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _load(args, overrides: dict) -> dict:
    doc = cfgmod.load_document(args.config) if getattr(args, "config", None) else {}
    for text in getattr(args, "set", None) or []:
        key, value = cfgmod.parse_assignment(text)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfgmod.resolve(doc, overrides)


def _read(path) -> Trace:
    try:
        return read_capture(path)
    except OSError as exc:
        raise CommandError("input", f"{path}: {exc.strerror or exc}") from None
    except CaptureError as exc:
        raise CommandError("input", f"{path}: {exc}") from None


def _emit(doc, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out and out != "-":
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# --- inspect -----------------------------------------------------------------


def inspect_trace(trace, issuer_match: str = "WebRTC") -> list:
    table = FlowTable()
    reasm: dict = {}
    issuers: dict = {}
    asm = FrameAssembler()
    flows: dict = {}
    for pkt in trace.normalized():
        if pkt.flow is None:
            continue
        f = flows.setdefault(pkt.flow, {"packets": 0, "classes": {}, "ssrcs": set(), "pts": set(), "frames": {}})
        f["packets"] += 1
        cls = pkt.demux_class
        f["classes"][cls.value] = f["classes"].get(cls.value, 0) + 1
        if cls is DemuxClass.DTLS:
            records, _ = parse_records_lenient(pkt.payload)
            r = reasm.setdefault(pkt.flow, HandshakeReassembler())
            try:
                messages = r.feed_all(records)
            except DtlsError:
                messages = []
            for msg in messages:
                if msg.msg_type != HT_CERTIFICATE:
                    continue
                try:
                    info = extract_issuer(msg)
                except DtlsError:
                    continue
                issuers.setdefault(pkt.flow, info)
                table.observe_dtls(pkt.flow, info, pkt.timestamp_us, issuer_match)
        elif cls is DemuxClass.RTP:
            try:
                hdr = parse_rtp(pkt.payload)
            except RtpError:
                continue
            f["ssrcs"].add(hdr.ssrc)
            f["pts"].add(hdr.payload_type)
            ev = asm.push(hdr)
            if ev.new_frame:
                f["frames"][hdr.ssrc] = f["frames"].get(hdr.ssrc, 0) + 1
    out = []
    for key in sorted(flows, key=lambda k: k.to_bytes()):
        f = flows[key]
        st = table.lookup(key)
        info = issuers.get(key) or issuers.get(key.reverse())
        out.append({
            "flow": str(key),
            "transport": "udp" if key.proto == PROTO_UDP else "tcp",
            "packets": f["packets"],
            "classes": dict(sorted(f["classes"].items())),
            "webrtc_flagged": bool(st and st.webrtc_flagged),
            "issuer": info.issuer_common_name if info else None,
            "issuer_provenance": info.provenance if info else None,
            "ssrcs": sorted(f["ssrcs"]),
            "payload_types": sorted(f["pts"]),
            "frames": {str(k): v for k, v in sorted(f["frames"].items())},
        })
    return out


def cmd_inspect(args) -> int:
    trace = _read(args.capture)
    flows = inspect_trace(trace, args.issuer)
    if not args.quiet:
        for f in flows:
            flag = "webrtc" if f["webrtc_flagged"] else "-"
            mix = ",".join(f"{k}={v}" for k, v in f["classes"].items())
            print(f"{f['flow']}\t{flag}\t{mix}\tssrcs={len(f['ssrcs'])}\tpts={f['payload_types']}", file=sys.stderr)
    _emit({"packets": len(trace), "flows": flows}, args.json)
    return 0


# --- attack ------------------------------------------------------------------


def _chain_overrides(args) -> Optional[list]:
    chain = []
    if args.block_data_channel:
        chain.append({"type": "data_channel_block"})
    if args.frame_drop is not None:
        chain.append({"type": "frame_drop", "rate": args.frame_drop, "mode": args.frame_drop_mode})
    if args.uniform_loss is not None:
        chain.append({"type": "uniform_packet_loss", "rate": args.uniform_loss})
    if args.delay_ms is not None:
        chain.append({"type": "fixed_delay", "delay_ms": args.delay_ms})
    return chain or None


def cmd_attack(args) -> int:
    from .engine import run_offline

    overrides: dict = {}
    chain_flags = _chain_overrides(args)
    if chain_flags is not None:
        overrides["attack.chain"] = chain_flags
    if args.shards is not None:
        overrides["attack.shards"] = args.shards
    if args.threads is not None:
        overrides["attack.threads"] = args.threads
    cfg = _load(args, overrides)
    chain = cfgmod.build_chain(cfg["attack"]["chain"], cfg["seed"])
    trace = _read(args.input)
    a = cfg["attack"]
    out, report = run_offline(trace, chain, shards=a["shards"], threads=a["threads"],
                              table_capacity=a["table_capacity"], ssrc_slots=a["ssrc_slots"], seed=cfg["seed"], config=cfg)
    write_capture(out, args.output)
    report.run_timestamp = _now()
    report_path = args.report or str(Path(args.output).with_suffix(".report.json"))
    write_report(report, report_path)
    t = report.totals
    print(f"packets_in={t['packets_in']} packets_out={t['packets_out']} dropped={t['packets_dropped']} "
          f"delayed={t['packets_delayed']} report={report_path}")
    return 0


# --- synth -------------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import synth
    from .detect import pair_fixture

    overrides = {}
    for flag, key in (("scenario", "synth.scenario"), ("duration_s", "synth.duration_s"), ("issuer", "synth.issuer"),
                      ("fragment_at", "synth.fragment_at"), ("source", "synth.source.kind"),
                      ("profile", "synth.source.profile"), ("flows", "synth.flows"), ("packets", "synth.packets")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.audio:
        overrides["synth.audio"] = True
    cfg = _load(args, overrides)
    s = cfg["synth"]
    seed = cfg["seed"]
    scenario = s["scenario"]
    try:
        if scenario == "video":
            spec = cfgmod.build_stream(cfg)
            stream = synth.gen_video_stream(cfgmod.build_source(cfg), spec)
            streams = [stream.packets]
            if s["audio"]:
                streams.append(synth.gen_audio_stream(
                    synth.StreamSpec(flow=spec.flow, ssrc=spec.ssrc + 1, payload_type=111,
                                     duration_s=spec.duration_s, seed=seed)))
            trace = synth.merge(*streams)
        elif scenario == "dtls":
            flow = synth.StreamSpec().flow
            trace = synth.merge(synth.gen_dtls_flight(s["issuer"], flow, s["fragment_at"], seed=seed))
        elif scenario == "snowflake":
            trace = synth.snowflake_fixture(seed, s["duration_s"], s["app_data_packets"], s["issuer"],
                                            s["fragment_at"], s["audio"])
        elif scenario == "stress":
            trace = synth.gen_stress_trace(s["flows"], s["packets"], seed=seed)
        else:
            d = cfg["detect"]
            trace = pair_fixture(seed, d["rate"], d["baseline_s"], d["attack_s"])
    except ValueError as exc:
        raise CommandError("config", f"synth: {exc}", 2) from None
    write_capture(trace, args.output)
    print(f"wrote {len(trace)} packets to {args.output}")
    return 0


# --- sim ---------------------------------------------------------------------


def cmd_sim(args) -> int:
    from .attack import Chain
    from .sim import degradation_label, differential_ratio, simulate, write_windows_csv

    overrides = {}
    if args.rates is not None:
        overrides["sim.rates"] = [float(r) for r in args.rates.split(",") if r.strip()]
    for flag, key in (("duration_s", "sim.duration_s"), ("delay_ms", "sim.delay_ms"),
                      ("qos_recovery", "sim.qos_recovery"), ("attack", "sim.attack")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    cfg = _load(args, overrides)
    m = cfg["sim"]
    covert = cfgmod.build_covert(cfg)
    video = cfgmod.build_source(cfg, "sim")
    extra = (FixedDelay(int(m["delay_ms"])),) if m["delay_ms"] else ()

    def policy_for(rate):
        first = FrameDrop(rate, seed=cfg["seed"]) if m["attack"] == "frame_drop" else UniformPacketLoss(rate, seed=cfg["seed"])
        return Chain((first,) + extra)

    kwargs = dict(qos_recovery=m["qos_recovery"], settle_windows=m["settle_windows"])
    baseline = simulate(covert, video, FrameDrop(0.0, seed=cfg["seed"]), m["duration_s"], cfg["seed"], **kwargs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for rate in m["rates"]:
        rep = simulate(covert, video, policy_for(rate), m["duration_s"], cfg["seed"], **kwargs)
        ratio = differential_ratio(rep, baseline)
        results = rep.to_dict()
        results["differential_ratio"] = ratio
        results["degradation"] = degradation_label(rep, baseline)
        run = RunReport(kind="sim", seed=cfg["seed"], config=cfg, results=results, run_timestamp=_now())
        stem = f"sim_rate_{rate:.2f}"
        write_report(run, out_dir / f"{stem}.json")
        if args.csv:
            write_windows_csv(rep, out_dir / f"{stem}.csv")
        summary.append({"rate": rate, "report": str(out_dir / f"{stem}.json"),
                        "covert_goodput_bytes_per_s": rep.covert_goodput_bytes_per_s,
                        "video_delivered_fps": rep.video_delivered_fps,
                        "video_final_profile": rep.video_final_profile,
                        "differential_ratio": ratio if ratio != float("inf") else "inf"})
    _emit({"reports": summary}, None)
    return 0


# --- detect ------------------------------------------------------------------


def cmd_detect(args) -> int:
    from .detect import distinguish, frame_sizes, write_frame_sizes_csv

    overrides = {}
    for flag, key in (("threshold", "detect.threshold"), ("min_frames", "detect.min_frames")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    cfg = _load(args, overrides)
    d = cfg["detect"]
    pts = frozenset(d["pt_set"])
    opts = dict(bin_width=d["hist_width"], hist_max=d["hist_max"], marker_only=d["marker_only"])
    if args.baseline and args.under_attack:
        base_pkts = list(_read(args.baseline).normalized())
        att_pkts = list(_read(args.under_attack).normalized())
    elif args.capture:
        if args.split_s is None:
            raise CommandError("config", "detect: --split-s is required with a single capture", 2)
        pkts = list(_read(args.capture).normalized())
        cut = pkts[0].timestamp_us + round(args.split_s * 1e6) if pkts else 0
        base_pkts = [p for p in pkts if p.timestamp_us < cut]
        att_pkts = [p for p in pkts if p.timestamp_us >= cut]
    else:
        raise CommandError("config", "detect: give CAPTURE --split-s or --baseline and --under-attack", 2)
    base = {s.ssrc: s for s in frame_sizes(base_pkts, pts, **opts)}
    att = {s.ssrc: s for s in frame_sizes(att_pkts, pts, **opts)}
    verdicts = []
    for ssrc in sorted(set(base) & set(att)):
        if base[ssrc].mean_frame_bytes <= 0:
            continue
        v = distinguish(base[ssrc], att[ssrc], d["threshold"], d["min_frames"])
        verdicts.append({"ssrc": ssrc, **v.to_dict(), "baseline": base[ssrc].to_dict(),
                         "under_attack": att[ssrc].to_dict()})
        print(f"ssrc=0x{ssrc:08x} label={v.label.value} reduction={v.reduction_fraction:.3f} "
              f"frames={v.frames_observed[0]}/{v.frames_observed[1]}", file=sys.stderr)
    report = RunReport(kind="detect", seed=cfg["seed"], config=cfg, detector=verdicts, run_timestamp=_now())
    if args.report:
        write_report(report, args.report)
    if args.csv:
        write_frame_sizes_csv(list(base.values()), args.csv + ".baseline.csv", "baseline")
        write_frame_sizes_csv(list(att.values()), args.csv + ".under_attack.csv", "under_attack")
    _emit({"verdicts": [{k: v[k] for k in ("ssrc", "label", "reduction_fraction", "frames_observed")}
                        for v in verdicts]}, None)
    return 0


# --- report ------------------------------------------------------------------


def cmd_report(args) -> int:
    try:
        report = read_report(args.path)
    except OSError as exc:
        raise CommandError("input", f"{args.path}: {exc.strerror or exc}") from None
    except (ValueError, TypeError) as exc:
        raise CommandError("input", f"{args.path}: {exc}") from None
    doc = report.to_dict()
    if args.field:
        for part in args.field.split("."):
            if not isinstance(doc, dict) or part not in doc:
                raise CommandError("input", f"{args.path}: no field {args.field!r}")
            doc = doc[part]
    _emit(doc, None)
    return 0


# --- parser ------------------------------------------------------------------


def _common(p, seed: bool = True):
    p.add_argument("--config", help="YAML or JSON config document")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="seed (config key: seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffdeg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarize flows in a capture")
    p.add_argument("capture")
    p.add_argument("--json", default="-", help="write the JSON summary here (default stdout)")
    p.add_argument("--issuer", default="WebRTC", help="certificate issuer that flags a flow")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("attack", help="run a capture through a policy chain")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--report", help="report path (default OUTPUT with .report.json)")
    p.add_argument("--block-data-channel", action="store_true", help="append data_channel_block to attack.chain")
    p.add_argument("--frame-drop", type=float, metavar="RATE", help="append frame_drop to attack.chain")
    p.add_argument("--frame-drop-mode", choices=("bernoulli", "periodic"), default="bernoulli")
    p.add_argument("--uniform-loss", type=float, metavar="RATE", help="append uniform_packet_loss to attack.chain")
    p.add_argument("--delay-ms", type=int, help="append fixed_delay to attack.chain")
    p.add_argument("--shards", type=int, help="attack.shards")
    p.add_argument("--threads", type=int, help="attack.threads")
    _common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("synth", help="write a synthetic capture")
    p.add_argument("output")
    p.add_argument("--scenario", help="synth.scenario: video|dtls|snowflake|stress|pair")
    p.add_argument("--duration-s", type=float, help="synth.duration_s")
    p.add_argument("--issuer", help="synth.issuer")
    p.add_argument("--fragment-at", type=int, help="synth.fragment_at")
    p.add_argument("--source", choices=("adaptive", "non_adaptive"), help="synth.source.kind")
    p.add_argument("--profile", help="synth.source.profile")
    p.add_argument("--flows", type=int, help="synth.flows")
    p.add_argument("--packets", type=int, help="synth.packets")
    p.add_argument("--audio", action="store_true", help="synth.audio")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sim", help="differential degradation simulation sweep")
    p.add_argument("--rates", help="sim.rates, comma separated")
    p.add_argument("--duration-s", type=float, help="sim.duration_s")
    p.add_argument("--delay-ms", type=int, help="sim.delay_ms")
    p.add_argument("--qos-recovery", type=float, help="sim.qos_recovery")
    p.add_argument("--attack", choices=("frame_drop", "uniform_packet_loss"), help="sim.attack")
    p.add_argument("--out-dir", default="sim-reports")
    p.add_argument("--csv", action="store_true", help="also write per-window CSV time series")
    _common(p)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("detect", help="adaptive vs non-adaptive frame-size distinguisher")
    p.add_argument("capture", nargs="?")
    p.add_argument("--split-s", type=float, help="seconds from capture start where the attack phase begins")
    p.add_argument("--baseline", help="capture of the baseline phase")
    p.add_argument("--under-attack", help="capture of the attack phase")
    p.add_argument("--threshold", type=float, help="detect.threshold")
    p.add_argument("--min-frames", type=int, help="detect.min_frames")
    p.add_argument("--report", help="write a RunReport here")
    p.add_argument("--csv", metavar="PREFIX", help="write per-frame sizes to PREFIX.{baseline,under_attack}.csv")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="validate and print a report")
    p.add_argument("path")
    p.add_argument("--field", help="dotted path of a field to print")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
